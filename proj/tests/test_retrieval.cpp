#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <limits>

#include "kilo/retrieval.hpp"
#include "support.hpp"

using namespace kilo;

namespace {

NodeId add(KnowledgeGraph& g, const std::string& name, std::vector<double> gat = {}) {
  EntityNode n;
  n.canonical = name;
  n.gat_embedding = std::move(gat);
  return g.add_node(n);
}

void edge(KnowledgeGraph& g, NodeId h, const std::string& rel, NodeId t, std::size_t weight = 1) {
  for (std::size_t i = 0; i < weight; ++i) g.observe_edge(h, rel, t, 0.9, "s" + std::to_string(i));
}

std::vector<EntityMention> mention(NodeId id) { return {EntityMention{"x", {0, 1}, id}}; }

}  // namespace

TEST_CASE("linking prefers the longest alias") {
  KnowledgeGraph g;
  const auto diabetes = add(g, "diabetes");
  const auto t2d = add(g, "type 2 diabetes");
  const auto insulin = add(g, "insulin");
  const std::string text = "Insulin is used for Type 2 Diabetes and diabetes.";
  const auto m = link_entities(text, g);
  REQUIRE(m.size() == 3);
  CHECK(m[0].node_id == insulin);
  CHECK(m[0].surface == "Insulin");
  CHECK(m[1].node_id == t2d);
  CHECK(m[1].surface == "Type 2 Diabetes");
  CHECK(text.substr(m[1].span.begin, m[1].span.end - m[1].span.begin) == "Type 2 Diabetes");
  CHECK(m[2].node_id == diabetes);
  for (std::size_t i = 1; i < m.size(); ++i) CHECK(m[i - 1].span.end <= m[i].span.begin);
}

TEST_CASE("linking an empty graph or unmatched text yields nothing") {
  KnowledgeGraph g;
  CHECK(link_entities("anything at all", g).empty());
  add(g, "aspirin");
  CHECK(link_entities("nothing here", g).empty());
  CHECK(link_entities("", g).empty());
}

TEST_CASE("k-hop on a chain") {
  KnowledgeGraph g;
  const auto a = add(g, "a"), b = add(g, "b"), c = add(g, "c");
  edge(g, a, "r", b);
  edge(g, b, "r", c);
  RetrievalConfig cfg;

  cfg.k = 1;
  auto r = k_hop_retrieve(g, mention(a), cfg);
  REQUIRE(r.triples.size() == 1);
  CHECK(r.triples[0] == Triple{"a", "r", "b"});

  cfg.k = 2;
  r = k_hop_retrieve(g, mention(a), cfg);
  CHECK(r.triples == std::vector<Triple>{{"a", "r", "b"}, {"b", "r", "c"}});

  cfg.k = 0;
  CHECK(k_hop_retrieve(g, mention(a), cfg).triples.empty());
  cfg.k = 3;
  CHECK(k_hop_retrieve(g, {}, cfg).triples.empty());
}

TEST_CASE("incoming edges only with include_incoming") {
  KnowledgeGraph g;
  const auto a = add(g, "a"), b = add(g, "b");
  edge(g, b, "r", a);
  RetrievalConfig cfg;
  CHECK(k_hop_retrieve(g, mention(a), cfg).triples.empty());
  cfg.include_incoming = true;
  CHECK(k_hop_retrieve(g, mention(a), cfg).triples.size() == 1);
}

TEST_CASE("k-hop agrees with a Floyd-Warshall oracle on random graphs") {
  constexpr std::size_t inf = std::numeric_limits<std::size_t>::max() / 4;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t n = 1 + rng.below(50);
    KnowledgeGraph g;
    for (std::size_t i = 0; i < n; ++i) add(g, "n" + std::to_string(i));
    std::vector<std::vector<std::size_t>> d(n, std::vector<std::size_t>(n, inf));
    for (std::size_t i = 0; i < n; ++i) d[i][i] = 0;
    const std::size_t m = rng.below(2 * n + 1);
    for (std::size_t e = 0; e < m; ++e) {
      const auto h = rng.below(n), t = rng.below(n);
      if (h == t) continue;
      edge(g, h, rng.bernoulli(0.5) ? "p" : "q", t);
      d[h][t] = d[t][h] = 1;
    }
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) d[i][j] = std::min(d[i][j], d[i][k] + d[k][j]);

    std::vector<EntityMention> ms;
    std::vector<std::size_t> linked;
    for (std::size_t i = 0, c = 1 + rng.below(3); i < c; ++i) {
      linked.push_back(rng.below(n));
      ms.push_back(EntityMention{"x", {0, 1}, linked.back()});
    }
    std::size_t prev = 0;
    for (std::size_t k = 0; k <= 4; ++k) {
      RetrievalConfig cfg;
      cfg.k = k;
      const auto got = k_hop_retrieve(g, ms, cfg);
      std::vector<Triple> want;
      for (const auto& [key, e] : g.edges()) {
        std::size_t best = inf;
        for (auto l : linked) best = std::min(best, d[l][key.head]);
        if (k > 0 && best <= k - 1) want.push_back(Triple{g.nodes().at(key.head).canonical, key.rel,
                                                         g.nodes().at(key.tail).canonical});
      }
      CHECK(got.triples == want);
      CHECK(got.triples.size() >= prev);
      prev = got.triples.size();
    }
  }
}

TEST_CASE("ranking puts heavier edges first") {
  KnowledgeGraph g;
  const auto a = add(g, "a"), b = add(g, "b"), c = add(g, "c");
  edge(g, a, "r", b, 1);
  edge(g, a, "r", c, 3);
  RetrievalConfig cfg;
  const auto r = rank_triples(k_hop_retrieve(g, mention(a), cfg), {}, g, cfg);
  REQUIRE(r.triples.size() == 2);
  CHECK(r.triples[0].tail == "c");
  CHECK(r.scores[0].weight == 3);
  CHECK(r.scores[1].weight == 1);
}

TEST_CASE("ranking breaks weight ties by cosine then lexicographically") {
  KnowledgeGraph g;
  const auto x = add(g, "x", {1, 0}), y = add(g, "y", {0, 1}), z = add(g, "z", {0, 1});
  edge(g, y, "r", x);
  edge(g, x, "r", y);
  edge(g, z, "b", x);
  edge(g, z, "a", x);
  RetrievalConfig cfg;
  cfg.k = 2;
  std::vector<EntityMention> ms{{"x", {0, 1}, x}, {"y", {0, 1}, y}, {"z", {0, 1}, z}};
  const std::vector<double> query{0, 1};
  const auto r = rank_triples(k_hop_retrieve(g, ms, cfg), query, g, cfg);
  REQUIRE(r.triples.size() == 4);
  CHECK(r.triples[0] == Triple{"y", "r", "x"});
  CHECK(r.triples[1] == Triple{"z", "a", "x"});
  CHECK(r.triples[2] == Triple{"z", "b", "x"});
  CHECK(r.triples[3] == Triple{"x", "r", "y"});
}

TEST_CASE("ranking truncates to max_triples") {
  KnowledgeGraph g;
  const auto hub = add(g, "hub");
  for (int i = 0; i < 7; ++i) edge(g, hub, "r", add(g, "t" + std::to_string(i)), 1 + i % 3);
  RetrievalConfig cfg;
  const auto all = k_hop_retrieve(g, mention(hub), cfg);
  CHECK(all.triples.size() == 7);
  const auto r = rank_triples(all, {}, g, cfg);
  CHECK(r.triples.size() == 5);
  for (std::size_t i = 1; i < r.scores.size(); ++i) CHECK(r.scores[i - 1].weight >= r.scores[i].weight);
}

TEST_CASE("ranking is independent of input order") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    RetrievedKnowledge k;
    KnowledgeGraph g;
    const std::size_t n = 1 + rng.below(12);
    for (std::size_t i = 0; i < n; ++i) {
      const auto h = add(g, "h" + std::to_string(i), {rng.normal(), rng.normal()});
      k.triples.push_back(Triple{"h" + std::to_string(i), rng.bernoulli(0.5) ? "a" : "b", "t"});
      k.scores.push_back(TripleScore{1 + rng.below(3), 0.0});
      k.edges.push_back(EdgeKey{h, k.triples.back().rel, 0});
    }
    RetrievalConfig cfg;
    cfg.max_triples = 1 + rng.below(6);
    const std::vector<double> q{rng.normal(), rng.normal()};
    const auto ref = rank_triples(k, q, g, cfg);
    CHECK(ref.triples.size() == std::min(n, cfg.max_triples));
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);
    RetrievedKnowledge shuffled;
    for (auto i : perm) {
      shuffled.triples.push_back(k.triples[i]);
      shuffled.scores.push_back(k.scores[i]);
      shuffled.edges.push_back(k.edges[i]);
    }
    CHECK(rank_triples(shuffled, q, g, cfg).triples == ref.triples);
  }
}

TEST_CASE("render_instruction templates") {
  RetrievedKnowledge k;
  CHECK(render_instruction(k).empty());
  k.triples = {{"insulin", "used for", "diabetes"}};
  CHECK(render_instruction(k) == "Instruction: Remember that insulin used for diabetes.");
  k.triples.push_back({"a", "treats", "b"});
  CHECK(render_instruction(k) ==
        "Instruction: Remember that insulin used for diabetes. Instruction: Remember that a treats b.");
  CHECK(render_instruction(k, {{"treats", "is a treatment for"}}) ==
        "Instruction: Remember that insulin used for diabetes. Instruction: Remember that a is a treatment for b.");
}

TEST_CASE("augment_input joins instruction and input") {
  RetrievalConfig cfg;
  auto b = augment_input("q", "I.", cfg, 1);
  CHECK(b.augmented_input == "I.\nq");
  CHECK(b.triples_used == 1);
  CHECK(b.augmented_input.size() == 2 + cfg.separator.size() + 1);
  b = augment_input("q", "", cfg, 3);
  CHECK(b.augmented_input == "q");
  CHECK(b.triples_used == 0);
}

TEST_CASE("build_prompt is deterministic and uses the linked entity") {
  KnowledgeGraph g;
  const auto ins = add(g, "insulin", {1, 0});
  const auto dia = add(g, "diabetes", {0, 1});
  edge(g, ins, "used for", dia, 2);
  RetrievalConfig cfg;
  const auto a = build_prompt("Is insulin useful?", g, cfg);
  CHECK(a.instruction == "Instruction: Remember that insulin used for diabetes.");
  CHECK(a.augmented_input == a.instruction + "\nIs insulin useful?");
  CHECK(a.triples_used == 1);
  const auto b = build_prompt("Is insulin useful?", g, cfg);
  CHECK(a.augmented_input == b.augmented_input);
  CHECK(build_prompt("unrelated", g, cfg).augmented_input == "unrelated");
}

TEST_CASE("lexicon files") {
  const auto dir = kilo_test::scratch_dir("lex");
  kilo_test::spit(dir / "ok.tsv", "# comment\n\ntreats\tis a treatment for\r\ncauses\tleads to\n");
  const auto lex = load_lexicon((dir / "ok.tsv").string());
  CHECK(lex.size() == 2);
  CHECK(lex.at("treats") == "is a treatment for");
  kilo_test::spit(dir / "bad.tsv", "treats is missing a tab\n");
  CHECK_THROWS_WITH_AS(load_lexicon((dir / "bad.tsv").string()), doctest::Contains("line 1"), Error);
  CHECK_THROWS_AS(load_lexicon((dir / "none.tsv").string()), Error);
}
