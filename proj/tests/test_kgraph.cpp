#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "kilo/kgraph.hpp"
#include "support.hpp"

using namespace kilo;
using kilo_test::find_span;

namespace {

Document annotated(const std::string& id, const std::string& text, std::vector<GoldEntity> ents,
                   std::vector<GoldRelation> rels, std::vector<std::vector<Span>> chains = {}) {
  Document d{id, "dom", text, 0, GoldAnnotations{std::move(ents), std::move(rels), std::move(chains)}};
  return d;
}

EntityNode raw_node(const std::string& name, std::vector<double> emb, std::size_t freq = 1) {
  EntityNode n;
  n.canonical = name;
  n.etype = "T";
  n.embedding = std::move(emb);
  n.frequency = freq;
  n.sources = {"src-" + name};
  return n;
}

std::string serialized(const KnowledgeGraph& g) {
  std::ostringstream os;
  write_graph(os, g);
  return os.str();
}

void check_merge_invariant(const KnowledgeGraph& g) {
  const double thr = g.config().merge_threshold;
  for (auto a = g.nodes().begin(); a != g.nodes().end(); ++a)
    for (auto b = std::next(a); b != g.nodes().end(); ++b) {
      if (norm2(a->second.embedding) == 0.0 || norm2(b->second.embedding) == 0.0) continue;
      CHECK(cosine_similarity(a->second.embedding, b->second.embedding) <= thr);
    }
}

void check_edge_invariants(const KnowledgeGraph& g) {
  for (const auto& [k, e] : g.edges()) {
    CHECK(e.weight == e.sources.size());
    CHECK(e.confidence > g.config().edge_threshold);
    CHECK(g.node(e.head) != nullptr);
    CHECK(g.node(e.tail) != nullptr);
  }
}

void check_prune_invariant(const KnowledgeGraph& g) {
  const auto deg = g.degrees();
  for (const auto& [id, n] : g.nodes()) CHECK_FALSE((deg.at(id) <= 1 && n.frequency <= 1));
}

}  // namespace

TEST_CASE("extract applies the NER threshold and relation whitelist") {
  const std::string text = "Insulin treats Diabetes. Bob dislikes Kale.";
  auto doc = annotated("d", text,
                       {{find_span(text, "Insulin"), "DRUG", "Insulin", 0.9},
                        {find_span(text, "Diabetes"), "DISEASE", "Diabetes", 0.80},
                        {find_span(text, "Bob"), "PERSON", "Bob", 0.85},
                        {find_span(text, "Kale"), "FOOD", "Kale", 0.99}},
                       {{"Insulin", "treats", "Diabetes", 0.9}, {"Bob", "dislikes", "Kale", 0.9}});
  const auto ext = extract(doc, GraphConfig{});
  std::set<std::string> kept;
  for (const auto& e : ext.entities) kept.insert(e.canonical);
  CHECK(kept == std::set<std::string>{"Insulin", "Bob", "Kale"});  // 0.85 is kept, 0.80 dropped
  CHECK(ext.dropped_entities == 1);
  REQUIRE(ext.relations.size() == 1);
  CHECK(ext.relations[0].rel == "treats");
  CHECK(ext.dropped_relations == 1);
}

TEST_CASE("heuristic extractor handles unannotated documents") {
  Document doc{"h", "dom", "Insulin used for Type Diabetes. Metformin treats Diabetes.", 0, {}};
  const auto ext = extract(doc, GraphConfig{});
  std::vector<std::string> names;
  for (const auto& e : ext.entities) {
    names.push_back(e.canonical);
    CHECK(e.confidence == kHeuristicEntityConfidence);
  }
  CHECK(names == std::vector<std::string>{"Insulin", "Type Diabetes", "Metformin", "Diabetes"});
  REQUIRE(ext.relations.size() == 2);
  CHECK(ext.relations[0].head == "Insulin");
  CHECK(ext.relations[0].rel == "used for");
  CHECK(ext.relations[0].tail == "Type Diabetes");
  CHECK(ext.relations[1].head == "Metformin");
  CHECK(ext.relations[1].tail == "Diabetes");
  CHECK(ext.relations[0].confidence == kHeuristicRelationConfidence);
}

TEST_CASE("heuristic extractor does not link across sentences") {
  Document doc{"h", "dom", "Alpha. Treats Beta.", 0, {}};
  CHECK(extract(doc, GraphConfig{}).relations.empty());
}

TEST_CASE("coreference rewrites chain mentions and relation endpoints") {
  const std::string text = "Insulin is common. It used for diabetes.";
  auto doc = annotated("d", text,
                       {{find_span(text, "Insulin"), "DRUG", "insulin", 0.95},
                        {find_span(text, "It"), "PRONOUN", "it", 0.9},
                        {find_span(text, "diabetes"), "DISEASE", "diabetes", 0.95}},
                       {{"it", "used for", "diabetes", 0.9}},
                       {{find_span(text, "Insulin"), find_span(text, "It")}});
  const auto ext = apply_coref(extract(doc, GraphConfig{}), doc);
  REQUIRE(ext.relations.size() == 1);
  CHECK(ext.relations[0].head == "insulin");
  CHECK(ext.relations[0].rel == "used for");
  CHECK(ext.relations[0].tail == "diabetes");
  CHECK(ext.entities[1].canonical == "insulin");
  CHECK(ext.entities[1].coref_rewritten);
  CHECK(ext.entities[1].etype == "DRUG");
}

TEST_CASE("coreference without chains is the identity") {
  const auto docs = kilo_test::three_doc_fixture();
  const auto ext = extract(docs[1], GraphConfig{});
  CHECK(apply_coref(ext, docs[1]) == ext);
}

TEST_CASE("two coreference chains are rewritten independently") {
  const std::string text = "Alpha met Beta. He treats her.";
  auto doc = annotated("d", text,
                       {{find_span(text, "Alpha"), "P", "Alpha", 0.9},
                        {find_span(text, "Beta"), "P", "Beta", 0.9},
                        {find_span(text, "He"), "PRONOUN", "he", 0.9},
                        {find_span(text, "her"), "PRONOUN", "her", 0.9}},
                       {{"he", "treats", "her", 0.9}},
                       {{find_span(text, "Alpha"), find_span(text, "He")}, {find_span(text, "Beta"), find_span(text, "her")}});
  const auto ext = apply_coref(extract(doc, GraphConfig{}), doc);
  REQUIRE(ext.relations.size() == 1);
  CHECK(ext.relations[0].head == "Alpha");
  CHECK(ext.relations[0].tail == "Beta");
}

TEST_CASE("merge examples") {
  GraphConfig cfg;
  cfg.embed_dim = 2;
  {
    KnowledgeGraph g(cfg);
    g.add_node(raw_node("a", {3, 4}));
    g.add_node(raw_node("b", {4, 3}));
    g = merge_entities(std::move(g));
    REQUIRE(g.nodes().size() == 1);
    CHECK(g.nodes().begin()->first == 0);  // lower id survives
    CHECK(g.nodes().at(0).aliases == std::set<std::string>{"a", "b"});
    CHECK(g.find_alias("b") == NodeId{0});
  }
  {
    KnowledgeGraph g(cfg);
    g.add_node(raw_node("a", {1, 0}));
    g.add_node(raw_node("b", {0, 1}));
    CHECK(merge_entities(std::move(g)).nodes().size() == 2);
  }
  {
    KnowledgeGraph g(cfg);
    g.add_node(raw_node("a", {1, 0}, 3));
    g.add_node(raw_node("b", {0, 1}, 1));
    g.merge_nodes(0, 1);
    const auto& n = g.nodes().at(0);
    CHECK(n.embedding == std::vector<double>{0.75, 0.25});
    CHECK(n.frequency == 4);
    CHECK(n.sources == std::set<std::string>{"src-a", "src-b"});
  }
}

TEST_CASE("merging redirects edges and collapses duplicates") {
  GraphConfig cfg;
  cfg.embed_dim = 2;
  KnowledgeGraph g(cfg);
  const auto a = g.add_node(raw_node("a", {1, 0}));
  const auto b = g.add_node(raw_node("b", {0, 1}));
  const auto c = g.add_node(raw_node("c", {1, 1}));
  g.observe_edge(a, "treats", c, 0.9, "d1");
  g.observe_edge(b, "treats", c, 0.7, "d2");
  g.observe_edge(b, "treats", c, 0.7, "d1");
  g.observe_edge(a, "causes", b, 0.9, "d3");
  g.merge_nodes(a, b);
  REQUIRE(g.edges().size() == 1);  // a->b became a self loop and was dropped
  const auto& e = g.edges().at(EdgeKey{a, "treats", c});
  CHECK(e.sources == std::set<std::string>{"d1", "d2"});
  CHECK(e.weight == 2);
  CHECK(e.confidence == 0.9);
}

TEST_CASE("merge_entities leaves no pair above the threshold on random graphs") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    GraphConfig cfg;
    cfg.embed_dim = 4;
    KnowledgeGraph g(cfg);
    const std::size_t n = 20 + rng.below(150);
    std::vector<std::vector<double>> centers(5, std::vector<double>(4));
    for (auto& c : centers)
      for (auto& x : c) x = rng.normal();
    for (std::size_t i = 0; i < n; ++i) {
      auto v = centers[rng.below(centers.size())];
      for (auto& x : v) x += 0.4 * rng.normal();
      g.add_node(raw_node("n" + std::to_string(i), v, 1 + rng.below(3)));
    }
    for (int k = 0; k < 60; ++k) {
      const NodeId h = rng.below(n), t = rng.below(n);
      if (h != t) g.observe_edge(h, "causes", t, 0.9, "doc" + std::to_string(rng.below(4)));
    }
    const auto merged = merge_entities(g);
    check_merge_invariant(merged);
    check_edge_invariants(merged);
    std::size_t freq_before = 0, freq_after = 0;
    for (const auto& [id, node] : g.nodes()) freq_before += node.frequency;
    for (const auto& [id, node] : merged.nodes()) freq_after += node.frequency;
    CHECK(freq_before == freq_after);
    CHECK(merge_entities(merged) == merged);
  }
}

TEST_CASE("update_graph reinforcement, thresholds and identity") {
  GraphConfig cfg;
  const std::string t1 = "Insulin treats Diabetes.";
  auto doc1 = annotated("d1", t1,
                        {{find_span(t1, "Insulin"), "DRUG", "Insulin", 0.9},
                         {find_span(t1, "Diabetes"), "DISEASE", "Diabetes", 0.9}},
                        {{"Insulin", "treats", "Diabetes", 0.9}});
  auto doc2 = doc1;
  doc2.id = "d2";
  KnowledgeGraph g(cfg);
  g = update_graph(std::move(g), apply_coref(extract(doc1, cfg), doc1));
  g = update_graph(std::move(g), apply_coref(extract(doc2, cfg), doc2));
  REQUIRE(g.edges().size() == 1);
  CHECK(g.edges().begin()->second.weight == 2);

  // Re-processing a document already among the sources leaves weights alone.
  const auto before = g.edges().begin()->second.weight;
  g = update_graph(std::move(g), apply_coref(extract(doc1, cfg), doc1));
  CHECK(g.edges().begin()->second.weight == before);

  auto low = doc1;
  low.id = "d3";
  low.gold->relations[0] = {"Insulin", "causes", "Diabetes", 0.55};
  UpdateStats stats;
  g = update_graph(std::move(g), apply_coref(extract(low, cfg), low), &stats);
  CHECK(stats.relations_rejected == 1);
  CHECK(g.edges().size() == 1);

  const auto step = g.step();
  const auto same = update_graph(g, ExtractionResult{});
  CHECK(same.nodes() == g.nodes());
  CHECK(same.edges() == g.edges());
  CHECK(same.step() == step + 1);
}

TEST_CASE("relations to thresholded-out entities are skipped, not errors") {
  const std::string text = "Insulin treats Diabetes.";
  auto doc = annotated("d", text,
                       {{find_span(text, "Insulin"), "DRUG", "Insulin", 0.9},
                        {find_span(text, "Diabetes"), "DISEASE", "Diabetes", 0.5}},
                       {{"Insulin", "treats", "Diabetes", 0.9}});
  UpdateStats stats;
  const auto g = update_graph(KnowledgeGraph{}, apply_coref(extract(doc, GraphConfig{}), doc), &stats);
  CHECK(g.edges().empty());
  CHECK(stats.relations_missing_entity == 1);
}

TEST_CASE("prune examples") {
  GraphConfig cfg;
  cfg.embed_dim = 2;
  KnowledgeGraph g(cfg);
  const auto hub = g.add_node(raw_node("hub", {1, 0}, 5));
  const auto leaf1 = g.add_node(raw_node("leaf1", {0, 1}, 1));
  const auto leaf3 = g.add_node(raw_node("leaf3", {0, 1}, 3));
  const auto lonely = g.add_node(raw_node("lonely", {0, 1}, 1));
  const auto other = g.add_node(raw_node("other", {0, 1}, 2));
  g.observe_edge(hub, "causes", leaf1, 0.9, "d");
  g.observe_edge(hub, "causes", leaf3, 0.9, "d");
  g.observe_edge(hub, "causes", other, 0.9, "d");
  const auto p = prune_graph(g);
  CHECK(p.node(leaf1) == nullptr);
  CHECK(p.node(leaf3) != nullptr);
  CHECK(p.node(lonely) == nullptr);
  CHECK(p.node(hub) != nullptr);
  CHECK(p.edges().size() == 2);
  check_prune_invariant(p);
}

TEST_CASE("three-document fixture matches the hand trace") {
  const auto docs = kilo_test::three_doc_fixture();
  UpdateStats stats;
  const auto g = build_graph(docs, GraphConfig{}, &stats);

  REQUIRE(g.nodes().size() == 3);
  const auto& aspirin = g.nodes().at(0);
  const auto& headache = g.nodes().at(1);
  const auto& fever = g.nodes().at(4);
  CHECK(aspirin.canonical == "Aspirin");
  CHECK(aspirin.frequency == 3);
  CHECK(aspirin.aliases == std::set<std::string>{"Aspirin"});
  CHECK(aspirin.sources == std::set<std::string>{"d1", "d2"});
  CHECK(aspirin.etype == "DRUG");
  CHECK(headache.canonical == "Headache");
  CHECK(headache.frequency == 2);
  CHECK(fever.canonical == "Fever");
  CHECK(fever.frequency == 2);
  CHECK(fever.sources == std::set<std::string>{"d3"});

  REQUIRE(g.edges().size() == 1);
  const auto& e = g.edges().at(EdgeKey{0, "treats", 1});
  CHECK(e.weight == 2);
  CHECK(e.sources == std::set<std::string>{"d1", "d2"});
  CHECK(e.confidence == 0.9);

  CHECK(g.step() == 3);
  CHECK(g.next_id() == 6);
  CHECK(stats.nodes_added == 6);
  CHECK(stats.merges == 0);
  CHECK(stats.relations_rejected == 1);
  CHECK(stats.edges_added == 3);
  CHECK(stats.edges_reinforced == 1);

  const auto s = graph_stats(g);
  CHECK(s.nodes == 3);
  CHECK(s.edges == 1);
  CHECK(s.mean_degree == doctest::Approx(2.0 / 3.0));
  CHECK(s.weight_histogram == std::map<std::size_t, std::size_t>{{2, 1}});
}

TEST_CASE("build_graph edge cases and determinism") {
  const auto empty = build_graph({}, GraphConfig{});
  CHECK(empty.nodes().empty());
  CHECK(empty.edges().empty());
  const auto s = graph_stats(empty);
  CHECK(s.nodes == 0);
  CHECK(s.edges == 0);
  CHECK(s.mean_degree == 0.0);
  CHECK(s.weight_histogram.empty());

  SyntheticConfig sc;
  sc.docs_per_domain = 80;
  std::vector<Document> docs;
  for (const auto& d : generate_synthetic(sc).domains) docs.insert(docs.end(), d.docs.begin(), d.docs.end());
  CHECK(serialized(build_graph(docs, GraphConfig{})) == serialized(build_graph(docs, GraphConfig{})));

  auto bad = docs.front();
  bad.text.clear();
  CHECK_THROWS_AS(build_graph({bad}, GraphConfig{}), Error);
}

TEST_CASE("graph invariants hold on synthetic corpora") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    SyntheticConfig sc;
    sc.seed = seed;
    sc.docs_per_domain = 60;
    KnowledgeGraph g;
    for (const auto& d : generate_synthetic(sc).domains) {
      g = ingest_documents(std::move(g), d.docs);
      CHECK(g.nodes().size() <= 200);
      check_merge_invariant(g);
      check_prune_invariant(g);
      check_edge_invariants(g);
    }
  }
}

TEST_CASE("graph stats on two nodes and one edge") {
  GraphConfig cfg;
  cfg.embed_dim = 2;
  KnowledgeGraph g(cfg);
  g.add_node(raw_node("a", {1, 0}));
  g.add_node(raw_node("b", {0, 1}));
  g.observe_edge(0, "causes", 1, 0.9, "d");
  const auto s = graph_stats(g);
  CHECK(s.mean_degree == 1.0);
  std::size_t total = 0;
  for (const auto& [w, c] : s.weight_histogram) total += c;
  CHECK(total == s.edges);
}

TEST_CASE("persistence round-trips bit-exactly") {
  const auto dir = kilo_test::scratch_dir("kgraph");
  const auto fixture = build_graph(kilo_test::three_doc_fixture(), GraphConfig{});
  CHECK(persist_roundtrip(fixture, (dir / "g.jsonl").string()) == fixture);
  CHECK(persist_roundtrip(KnowledgeGraph{}, (dir / "empty.jsonl").string()) == KnowledgeGraph{});

  SyntheticConfig sc;
  sc.docs_per_domain = 50;
  const auto big = build_graph(generate_synthetic(sc).domains[0].docs, GraphConfig{});
  auto copy = big;
  for (auto& [id, n] : copy.mutable_nodes()) n.gat_embedding = {0.1 * static_cast<double>(id), 1.0 / 3.0};
  const auto back = persist_roundtrip(copy, (dir / "big.jsonl").string());
  CHECK(back == copy);
  CHECK(serialized(back) == serialized(copy));
  CHECK(back.config().merge_threshold == copy.config().merge_threshold);
  CHECK(back.alias_index() == copy.alias_index());
}

TEST_CASE("corrupt or truncated graph files are errors") {
  const auto fixture = build_graph(kilo_test::three_doc_fixture(), GraphConfig{});
  const auto text = serialized(fixture);
  {
    std::istringstream in(text.substr(0, text.rfind('\n', text.size() - 2) + 1));
    CHECK_THROWS_AS(read_graph(in), Error);
  }
  {
    auto lines = text;
    const auto second = lines.find('\n') + 1;
    lines.insert(second, "{garbage\n");
    std::istringstream in(lines);
    CHECK_THROWS_WITH_AS(read_graph(in), doctest::Contains("graph record 2"), Error);
  }
  {
    std::istringstream in("");
    CHECK_THROWS_AS(read_graph(in), Error);
  }
}

TEST_CASE("dot export lists nodes and labelled edges") {
  const auto dot = to_dot(build_graph(kilo_test::three_doc_fixture(), GraphConfig{}));
  CHECK(dot.find("digraph") != std::string::npos);
  CHECK(dot.find("Aspirin") != std::string::npos);
  CHECK(dot.find("treats") != std::string::npos);
}
