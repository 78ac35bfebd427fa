#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <set>
#include <sstream>

#include "kilo/corpus.hpp"
#include "kilo/retrieval.hpp"
#include "support.hpp"

using namespace kilo;

namespace {

Document plain(std::string id, std::string text, std::size_t label) {
  Document d;
  d.id = std::move(id);
  d.domain_id = "dom";
  d.text = std::move(text);
  d.label = label;
  return d;
}

std::string corpus_bytes(const SyntheticBenchmark& b) {
  std::ostringstream os;
  for (const auto& d : b.domains) write_corpus(os, d.docs);
  write_facts(os, b.facts);
  return os.str();
}

}  // namespace

TEST_CASE("load_corpus keeps file order") {
  std::istringstream in(R"({"id":"a","domain":"x","text":"one","label":0}
{"id":"b","domain":"y","text":"two","label":1}
{"id":"c","domain":"x","text":"three","label":0}
)");
  const auto docs = parse_corpus(in);
  REQUIRE(docs.size() == 3);
  CHECK(docs[0].id == "a");
  CHECK(docs[1].id == "b");
  CHECK(docs[2].id == "c");
  const auto groups = group_by_domain(docs);
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].name == "x");
  CHECK(groups[0].docs.size() == 2);
  CHECK(groups[1].name == "y");
}

TEST_CASE("missing label names the line") {
  std::istringstream in(R"({"id":"a","domain":"x","text":"one","label":0}
{"id":"b","domain":"x","text":"two"}
)");
  CHECK_THROWS_WITH_AS(parse_corpus(in), "line 2: missing label", Error);
}

TEST_CASE("duplicate id names both lines") {
  std::istringstream in(R"({"id":"d1","domain":"x","text":"one","label":0}
{"id":"d2","domain":"x","text":"two","label":0}
{"id":"d3","domain":"x","text":"three","label":0}
{"id":"d1","domain":"x","text":"four","label":0}
)");
  CHECK_THROWS_WITH_AS(parse_corpus(in), doctest::Contains("lines 1 and 4"), Error);
}

TEST_CASE("malformed json names the line") {
  std::istringstream in("{\"id\":\"a\",\"domain\":\"x\",\"text\":\"one\",\"label\":0}\n{not json\n");
  CHECK_THROWS_WITH_AS(parse_corpus(in), doctest::Contains("line 2"), Error);
}

TEST_CASE("out-of-bounds gold span is rejected on load") {
  std::istringstream in(
      R"({"id":"a","domain":"x","text":"abc","label":0,"gold":{"entities":[{"span":[0,9],"type":"T","canonical":"abc","confidence":0.9}],"relations":[],"coref":[]}})");
  CHECK_THROWS_WITH_AS(parse_corpus(in), doctest::Contains("span out of bounds"), Error);
}

TEST_CASE("load_corpus on a missing file is an error") {
  CHECK_THROWS_AS(load_corpus("/nonexistent/corpus.jsonl"), Error);
}

TEST_CASE("validate_document reports every violation") {
  auto ok = plain("d", "Insulin treats diabetes.", 1);
  CHECK(validate_document(ok, 2).empty());

  auto bad_label = plain("d", "x", 2);
  auto v = validate_document(bad_label, 2);
  REQUIRE(v.size() == 1);
  CHECK(v[0] == "label out of range");

  auto bad = plain("", "abc", 5);
  GoldAnnotations g;
  g.entities.push_back({Span{0, 10}, "T", "abc", 1.5});
  g.relations.push_back({"abc", "treats", "nothing", 0.9});
  bad.gold = g;
  v = validate_document(bad, 3);
  const std::set<std::string> got(v.begin(), v.end());
  CHECK(got.contains("id empty"));
  CHECK(got.contains("label out of range"));
  CHECK(got.contains("span out of bounds"));
  CHECK(got.contains("entity confidence out of range"));
  CHECK(got.contains("relation endpoint not an entity: nothing"));
  CHECK(v.size() >= 5);
}

TEST_CASE("corpus records round-trip through jsonl") {
  SyntheticConfig cfg;
  cfg.docs_per_domain = 30;
  cfg.n_domains = 2;
  const auto bench = generate_synthetic(cfg);
  std::ostringstream out;
  write_corpus(out, bench.domains[0].docs);
  std::istringstream in(out.str());
  const auto back = parse_corpus(in);
  REQUIRE(back.size() == bench.domains[0].docs.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].id == bench.domains[0].docs[i].id);
    CHECK(back[i].text == bench.domains[0].docs[i].text);
    CHECK(back[i].label == bench.domains[0].docs[i].label);
    CHECK(back[i].gold == bench.domains[0].docs[i].gold);
  }
  std::ostringstream again;
  write_corpus(again, back);
  CHECK(again.str() == out.str());
}

TEST_CASE("split sizes for 10 documents") {
  std::vector<Document> docs;
  for (int i = 0; i < 10; ++i) docs.push_back(plain("d" + std::to_string(i), "t", 0));
  const auto s = split_corpus(docs, 0.8, 0.1, 0.1, 1);
  CHECK(s.train.size() == 8);
  CHECK(s.val.size() == 1);
  CHECK(s.test.size() == 1);
}

TEST_CASE("split errors") {
  std::vector<Document> docs;
  for (int i = 0; i < 10; ++i) docs.push_back(plain("d" + std::to_string(i), "t", 0));
  CHECK_THROWS_AS(split_corpus(docs, 0.7, 0.1, 0.1, 1), Error);
  docs.resize(2);
  CHECK_THROWS_AS(split_corpus(docs, 0.8, 0.1, 0.1, 1), Error);
}

TEST_CASE("split is a seeded partition for all seeds") {
  for (std::size_t n : {3u, 4u, 7u, 10u, 57u, 200u}) {
    std::vector<Document> docs;
    for (std::size_t i = 0; i < n; ++i) docs.push_back(plain("d" + std::to_string(i), "t", 0));
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
      const auto s = split_corpus(docs, 0.8, 0.1, 0.1, seed);
      const auto again = split_corpus(docs, 0.8, 0.1, 0.1, seed);
      std::multiset<std::string> ids;
      for (const auto* part : {&s.train, &s.val, &s.test})
        for (const auto& d : *part) ids.insert(d.id);
      CHECK(ids.size() == n);
      CHECK(std::set<std::string>(ids.begin(), ids.end()).size() == n);
      CHECK_FALSE(s.train.empty());
      CHECK_FALSE(s.val.empty());
      CHECK_FALSE(s.test.empty());
      auto same = [](const std::vector<Document>& a, const std::vector<Document>& b) {
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i)
          if (a[i].id != b[i].id) return false;
        return true;
      };
      CHECK(same(s.train, again.train));
      CHECK(same(s.val, again.val));
      CHECK(same(s.test, again.test));
    }
  }
}

TEST_CASE("synthetic benchmark is deterministic and shaped by the config") {
  SyntheticConfig cfg;
  cfg.docs_per_domain = 60;
  cfg.seed = 17;
  const auto a = generate_synthetic(cfg);
  const auto b = generate_synthetic(cfg);
  CHECK(a.domains.size() == 4);
  CHECK(corpus_bytes(a) == corpus_bytes(b));
  cfg.seed = 18;
  CHECK(corpus_bytes(generate_synthetic(cfg)) != corpus_bytes(a));
  for (const auto& d : a.domains) {
    CHECK(d.docs.size() == 60);
    for (const auto& doc : d.docs) CHECK(validate_document(doc, cfg.classes).empty());
  }
}

TEST_CASE("every planted fact is a gold relation of its domain") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SyntheticConfig cfg;
    cfg.seed = seed;
    cfg.docs_per_domain = 50;
    const auto bench = generate_synthetic(cfg);
    std::map<std::string, const DomainCorpus*> by_name;
    for (const auto& d : bench.domains) by_name[d.name] = &d;
    for (const auto& f : bench.facts) {
      bool found = false;
      for (const auto& doc : by_name.at(f.domain)->docs) {
        // Coref-resolved view of the document's relations.
        const auto ext = apply_coref(extract(doc, GraphConfig{}), doc);
        for (const auto& r : ext.relations)
          found |= r.head == f.head && r.rel == f.rel && r.tail == f.tail;
        if (found) break;
      }
      CHECK_MESSAGE(found, f.head << " " << f.rel << " " << f.tail);
    }
  }
}

TEST_CASE("vocab overlap controls shared entities across domains") {
  SyntheticConfig cfg;
  cfg.docs_per_domain = 40;
  auto entity_sets = [](const SyntheticBenchmark& b) {
    std::vector<std::set<std::string>> sets;
    for (const auto& d : b.domains) {
      std::set<std::string> s;
      for (const auto& f : b.facts)
        if (f.domain == d.name) s.insert(f.head);
      sets.push_back(s);
    }
    return sets;
  };
  cfg.vocab_overlap = 0.0;
  auto sets = entity_sets(generate_synthetic(cfg));
  for (std::size_t i = 0; i < sets.size(); ++i)
    for (std::size_t j = i + 1; j < sets.size(); ++j) {
      std::vector<std::string> both;
      std::set_intersection(sets[i].begin(), sets[i].end(), sets[j].begin(), sets[j].end(), std::back_inserter(both));
      CHECK(both.empty());
    }
  cfg.vocab_overlap = 1.0;
  sets = entity_sets(generate_synthetic(cfg));
  for (std::size_t i = 1; i < sets.size(); ++i) CHECK(sets[i] == sets[0]);
}

// Independent oracle: bag-of-words multiclass perceptron over the rendered
// planted fact plus the document text. With coupling 1 the label is a function
// of the fact, so the data is separable and the perceptron must converge.
TEST_CASE("coupling 1 makes domain 1 linearly separable given the fact prompt") {
  SyntheticConfig cfg;
  cfg.coupling = 1.0;
  cfg.seed = 4;
  const auto bench = generate_synthetic(cfg);
  const auto& dom = bench.domains[0];
  std::map<std::string, const PlantedFact*> fact_of;
  for (const auto& f : bench.facts)
    if (f.domain == dom.name) fact_of[f.head] = &f;

  std::map<std::string, std::size_t> vocab;
  std::vector<std::vector<std::size_t>> feats;
  std::vector<std::size_t> labels;
  for (const auto& doc : dom.docs) {
    REQUIRE(doc.gold);
    const auto& f = *fact_of.at(doc.gold->entities.front().canonical);
    const std::string input = "Instruction: Remember that " + f.head + " " + f.rel + " " + f.tail + ".\n" + doc.text;
    std::vector<std::size_t> ids;
    std::string word;
    for (char c : input + " ") {
      if (std::isalnum(static_cast<unsigned char>(c))) {
        word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      } else if (!word.empty()) {
        ids.push_back(vocab.emplace(word, vocab.size()).first->second);
        word.clear();
      }
    }
    feats.push_back(ids);
    labels.push_back(doc.label);
  }
  const std::size_t C = cfg.classes;
  std::vector<std::vector<double>> w(C, std::vector<double>(vocab.size() + 1, 0.0));
  auto score = [&](std::size_t k, const std::vector<std::size_t>& x) {
    double s = w[k].back();
    for (auto i : x) s += w[k][i];
    return s;
  };
  std::size_t errors = 1;
  for (int epoch = 0; epoch < 500 && errors > 0; ++epoch) {
    errors = 0;
    for (std::size_t n = 0; n < feats.size(); ++n) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < C; ++k)
        if (score(k, feats[n]) > score(best, feats[n])) best = k;
      if (best == labels[n]) continue;
      ++errors;
      for (auto i : feats[n]) {
        w[labels[n]][i] += 1.0;
        w[best][i] -= 1.0;
      }
      w[labels[n]].back() += 1.0;
      w[best].back() -= 1.0;
    }
  }
  CHECK(errors == 0);
}
