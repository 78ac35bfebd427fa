#pragma once

// Entity linking, k-hop neighbourhood retrieval, triple ranking and
// instruction rendering: x_hat = Prompt(K_x) + x.

#include <algorithm>
#include <deque>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "kilo/core.hpp"
#include "kilo/corpus.hpp"
#include "kilo/kgraph.hpp"

namespace kilo {

struct RetrievalConfig {
  std::size_t k = 1;
  std::size_t max_triples = 5;
  bool include_incoming = false;
  std::string separator = "\n";
  // Optional relation label -> phrase overrides used when rendering.
  std::map<std::string, std::string> lexicon;

  void validate() const {
    if (max_triples < 1) throw UsageError("retrieval.max_triples must be >= 1");
  }
};

struct EntityMention {
  std::string surface;
  Span span;
  NodeId node_id = 0;
  friend bool operator==(const EntityMention&, const EntityMention&) = default;
};

struct Triple {
  std::string head;
  std::string rel;
  std::string tail;
  friend auto operator<=>(const Triple&, const Triple&) = default;
};

struct TripleScore {
  std::size_t weight = 0;
  double embedding_score = 0.0;
  friend bool operator==(const TripleScore&, const TripleScore&) = default;
};

struct RetrievedKnowledge {
  std::vector<Triple> triples;
  std::vector<TripleScore> scores;
  std::vector<EdgeKey> edges;  // source edge of each triple
  std::size_t k = 0;
};

struct PromptBundle {
  std::string instruction;
  std::size_t triples_used = 0;
  std::string augmented_input;
};

/// Greedy longest-match-first, left-to-right linking of node aliases against
/// token n-grams (case-insensitive). Matches never overlap.
inline std::vector<EntityMention> link_entities(std::string_view text, const KnowledgeGraph& g) {
  std::vector<EntityMention> out;
  const auto& index = g.alias_index();
  if (index.empty()) return out;
  std::size_t max_len = 1;
  for (const auto& [alias, id] : index)
    max_len = std::max<std::size_t>(max_len, static_cast<std::size_t>(std::count(alias.begin(), alias.end(), ' ')) + 1);

  const auto tokens = tokenize(text);
  std::size_t i = 0;
  while (i < tokens.size()) {
    bool matched = false;
    for (std::size_t len = std::min(max_len, tokens.size() - i); len >= 1; --len) {
      std::string key = tokens[i].text;
      for (std::size_t k = 1; k < len; ++k) key += " " + tokens[i + k].text;
      auto it = index.find(key);
      if (it == index.end()) continue;
      const Span span{tokens[i].begin, tokens[i + len - 1].end};
      out.push_back(EntityMention{std::string(text.substr(span.begin, span.end - span.begin)), span, it->second});
      i += len;
      matched = true;
      break;
    }
    if (!matched) ++i;
  }
  return out;
}

/// Undirected hop distance from the linked set, for every node reachable
/// within `limit` hops.
inline std::map<NodeId, std::size_t> hop_distances(const KnowledgeGraph& g, const std::set<NodeId>& sources,
                                                   std::size_t limit) {
  std::map<NodeId, std::vector<NodeId>> adj;
  for (const auto& [k, e] : g.edges()) {
    adj[e.head].push_back(e.tail);
    adj[e.tail].push_back(e.head);
  }
  std::map<NodeId, std::size_t> dist;
  std::deque<NodeId> queue;
  for (NodeId s : sources) {
    if (!g.node(s)) continue;
    dist[s] = 0;
    queue.push_back(s);
  }
  while (!queue.empty()) {
    const NodeId u = queue.front();
    queue.pop_front();
    const std::size_t du = dist[u];
    if (du >= limit) continue;
    for (NodeId v : adj[u]) {
      if (dist.emplace(v, du + 1).second) queue.push_back(v);
    }
  }
  return dist;
}

/// Every edge whose head lies within k-1 undirected hops of a linked node
/// (and, with include_incoming, every edge whose tail does). k = 0 -> empty.
/// Triples come out in edge-key order.
inline RetrievedKnowledge k_hop_retrieve(const KnowledgeGraph& g, const std::vector<EntityMention>& mentions,
                                         const RetrievalConfig& cfg) {
  RetrievedKnowledge out;
  out.k = cfg.k;
  if (cfg.k == 0 || mentions.empty()) return out;
  std::set<NodeId> linked;
  for (const auto& m : mentions) linked.insert(m.node_id);
  const auto dist = hop_distances(g, linked, cfg.k - 1);
  for (const auto& [key, e] : g.edges()) {
    const bool head_in = dist.contains(e.head);
    const bool tail_in = cfg.include_incoming && dist.contains(e.tail);
    if (!head_in && !tail_in) continue;
    out.triples.push_back(Triple{g.nodes().at(e.head).canonical, e.rel, g.nodes().at(e.tail).canonical});
    out.scores.push_back(TripleScore{e.weight, 0.0});
    out.edges.push_back(key);
  }
  return out;
}

/// Sorts by (weight desc, cosine(head GAT embedding, query) desc, triple asc)
/// and truncates to max_triples.
inline RetrievedKnowledge rank_triples(RetrievedKnowledge knowledge, std::span<const double> input_embedding,
                                       const KnowledgeGraph& g, const RetrievalConfig& cfg) {
  const std::size_t n = knowledge.triples.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto* head = g.node(knowledge.edges[i].head);
    knowledge.scores[i].embedding_score = head ? cosine_or_zero(head->gat_embedding, input_embedding) : 0.0;
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& sa = knowledge.scores[a];
    const auto& sb = knowledge.scores[b];
    if (sa.weight != sb.weight) return sa.weight > sb.weight;
    if (sa.embedding_score != sb.embedding_score) return sa.embedding_score > sb.embedding_score;
    return knowledge.triples[a] < knowledge.triples[b];
  });
  order.resize(std::min(n, cfg.max_triples));
  RetrievedKnowledge out;
  out.k = knowledge.k;
  for (std::size_t i : order) {
    out.triples.push_back(knowledge.triples[i]);
    out.scores.push_back(knowledge.scores[i]);
    out.edges.push_back(knowledge.edges[i]);
  }
  return out;
}

/// Mean GAT embedding of the linked nodes; the query vector for ranking.
inline std::vector<double> mention_query(const KnowledgeGraph& g, const std::vector<EntityMention>& mentions) {
  std::vector<double> q;
  std::size_t used = 0;
  for (const auto& m : mentions) {
    const auto* n = g.node(m.node_id);
    if (!n || n->gat_embedding.empty()) continue;
    if (q.empty()) q.assign(n->gat_embedding.size(), 0.0);
    if (q.size() != n->gat_embedding.size()) continue;
    for (std::size_t i = 0; i < q.size(); ++i) q[i] += n->gat_embedding[i];
    ++used;
  }
  if (used > 0)
    for (double& v : q) v /= static_cast<double>(used);
  return q;
}

/// "Instruction: Remember that {head} {rel} {tail}." per triple, space-joined.
inline std::string render_instruction(const RetrievedKnowledge& knowledge,
                                      const std::map<std::string, std::string>& lexicon = {}) {
  std::string out;
  for (const auto& t : knowledge.triples) {
    if (!out.empty()) out.push_back(' ');
    auto it = lexicon.find(t.rel);
    out += "Instruction: Remember that " + t.head + " " + (it == lexicon.end() ? t.rel : it->second) + " " + t.tail + ".";
  }
  return out;
}

inline PromptBundle augment_input(const std::string& x, const std::string& instruction, const RetrievalConfig& cfg,
                                  std::size_t triples_used = 0) {
  PromptBundle b;
  b.instruction = instruction;
  b.triples_used = instruction.empty() ? 0 : triples_used;
  b.augmented_input = instruction.empty() ? x : instruction + cfg.separator + x;
  return b;
}

/// link -> retrieve -> rank -> render -> augment.
inline PromptBundle build_prompt(const std::string& x, const KnowledgeGraph& g, const RetrievalConfig& cfg) {
  const auto mentions = link_entities(x, g);
  auto knowledge = k_hop_retrieve(g, mentions, cfg);
  knowledge = rank_triples(std::move(knowledge), mention_query(g, mentions), g, cfg);
  const auto instruction = render_instruction(knowledge, cfg.lexicon);
  return augment_input(x, instruction, cfg, knowledge.triples.size());
}

/// Lines of `relation<TAB>phrase`; blank lines and '#' comments ignored.
inline std::map<std::string, std::string> load_lexicon(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open lexicon file: " + path);
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 == line.size())
      throw Error("lexicon line " + std::to_string(lineno) + ": expected relation<TAB>phrase");
    out[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return out;
}

}  // namespace kilo
