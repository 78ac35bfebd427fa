#pragma once

// The dynamic memory bank: entity/relation extraction, coreference
// application, insertion with edge reinforcement, embedding-similarity
// merging, pruning, and persistence.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "kilo/core.hpp"
#include "kilo/corpus.hpp"
#include "kilo/learner.hpp"

namespace kilo {

using NodeId = std::uint64_t;

inline std::set<std::string> default_relation_whitelist() {
  return {"associated with", "administered by", "causes", "indicates", "is a", "located in",
          "part of",         "is a part of",    "treats", "used for"};
}

struct GraphConfig {
  double ner_threshold = 0.85;
  double edge_threshold = 0.6;
  double merge_threshold = 0.9;
  std::set<std::string> relation_whitelist = default_relation_whitelist();
  std::size_t prune_max_degree = 1;
  std::size_t prune_max_freq = 1;
  std::size_t embed_dim = 256;
  std::uint64_t embed_seed = 0;
  bool allow_self_relations = false;
  // Weight of the source-sentence features relative to the canonical string
  // in a node's initial embedding.
  double context_weight = 0.25;

  void validate() const {
    auto in_unit = [](double v) { return v > 0.0 && v < 1.0; };
    if (!in_unit(ner_threshold)) throw UsageError("graph.ner_threshold must be in (0,1)");
    if (!in_unit(edge_threshold)) throw UsageError("graph.edge_threshold must be in (0,1)");
    if (!in_unit(merge_threshold)) throw UsageError("graph.merge_threshold must be in (0,1)");
    if (embed_dim < 2 || (embed_dim & (embed_dim - 1)) != 0)
      throw UsageError("graph.embed_dim must be a power of two >= 2");
    if (!(context_weight >= 0.0)) throw UsageError("graph.context_weight must be >= 0");
  }

  FeatureEmbedder embedder() const { return FeatureEmbedder{embed_dim, embed_seed}; }
};

struct EntityNode {
  NodeId id = 0;
  std::string canonical;
  std::set<std::string> aliases;
  std::string etype;
  std::vector<double> embedding;
  std::vector<double> gat_embedding;  // encoder output; empty until encoded
  std::size_t frequency = 1;
  std::set<std::string> sources;
  friend bool operator==(const EntityNode&, const EntityNode&) = default;
};

struct EdgeKey {
  NodeId head = 0;
  std::string rel;
  NodeId tail = 0;
  friend auto operator<=>(const EdgeKey&, const EdgeKey&) = default;
};

struct RelationEdge {
  NodeId head = 0;
  std::string rel;
  NodeId tail = 0;
  double confidence = 0.0;
  std::size_t weight = 1;
  std::set<std::string> sources;
  friend bool operator==(const RelationEdge&, const RelationEdge&) = default;
};

class KnowledgeGraph {
 public:
  explicit KnowledgeGraph(GraphConfig config = {}) : config_(std::move(config)) {}

  const GraphConfig& config() const { return config_; }
  const std::map<NodeId, EntityNode>& nodes() const { return nodes_; }
  const std::map<EdgeKey, RelationEdge>& edges() const { return edges_; }
  std::map<NodeId, EntityNode>& mutable_nodes() { return nodes_; }
  std::uint64_t step() const { return step_; }
  NodeId next_id() const { return next_id_; }
  bool empty() const { return nodes_.empty(); }

  const EntityNode* node(NodeId id) const {
    auto it = nodes_.find(id);
    return it == nodes_.end() ? nullptr : &it->second;
  }

  /// Case-insensitive alias lookup (lowest id wins on collisions).
  std::optional<NodeId> find_alias(std::string_view alias) const {
    auto it = alias_index_.find(normalize_phrase(alias));
    if (it == alias_index_.end()) return std::nullopt;
    return it->second;
  }

  const std::map<std::string, NodeId>& alias_index() const { return alias_index_; }

  NodeId add_node(EntityNode n) {
    n.id = next_id_++;
    n.aliases.insert(n.canonical);
    const NodeId id = n.id;
    nodes_.emplace(id, std::move(n));
    index_aliases(nodes_.at(id));
    return id;
  }

  void add_alias(NodeId id, const std::string& alias) {
    auto& n = nodes_.at(id);
    if (n.aliases.insert(alias).second) index_aliases(n);
  }

  /// Inserts or reinforces an edge: a new source document adds one to weight.
  void observe_edge(NodeId head, const std::string& rel, NodeId tail, double confidence, const std::string& source) {
    EdgeKey key{head, rel, tail};
    auto it = edges_.find(key);
    if (it == edges_.end()) {
      edges_.emplace(key, RelationEdge{head, rel, tail, confidence, 1, {source}});
      return;
    }
    auto& e = it->second;
    e.confidence = std::max(e.confidence, confidence);
    if (e.sources.insert(source).second) e.weight = e.sources.size();
  }

  /// Folds node `from` into `into`; edges are redirected and duplicates collapsed.
  void merge_nodes(NodeId into, NodeId from) {
    auto& keep = nodes_.at(into);
    auto& drop = nodes_.at(from);
    const double fk = static_cast<double>(keep.frequency);
    const double fd = static_cast<double>(drop.frequency);
    for (std::size_t i = 0; i < keep.embedding.size(); ++i)
      keep.embedding[i] = (fk * keep.embedding[i] + fd * drop.embedding[i]) / (fk + fd);
    keep.frequency += drop.frequency;
    keep.aliases.insert(drop.aliases.begin(), drop.aliases.end());
    keep.sources.insert(drop.sources.begin(), drop.sources.end());
    keep.gat_embedding.clear();
    nodes_.erase(from);

    std::vector<RelationEdge> moved;
    for (auto it = edges_.begin(); it != edges_.end();) {
      if (it->second.head == from || it->second.tail == from) {
        moved.push_back(std::move(it->second));
        it = edges_.erase(it);
      } else {
        ++it;
      }
    }
    for (auto& e : moved) {
      if (e.head == from) e.head = into;
      if (e.tail == from) e.tail = into;
      if (e.head == e.tail && !config_.allow_self_relations) continue;
      EdgeKey key{e.head, e.rel, e.tail};
      auto it = edges_.find(key);
      if (it == edges_.end()) {
        e.weight = e.sources.size();
        edges_.emplace(key, std::move(e));
      } else {
        it->second.confidence = std::max(it->second.confidence, e.confidence);
        it->second.sources.insert(e.sources.begin(), e.sources.end());
        it->second.weight = it->second.sources.size();
      }
    }
    rebuild_alias_index();
  }

  void remove_node(NodeId id) {
    nodes_.erase(id);
    std::erase_if(edges_, [id](const auto& kv) { return kv.second.head == id || kv.second.tail == id; });
    rebuild_alias_index();
  }

  void advance_step() { ++step_; }
  void set_step(std::uint64_t s) { step_ = std::max(step_, s); }

  /// Used by deserialization only.
  void restore(std::map<NodeId, EntityNode> nodes, std::map<EdgeKey, RelationEdge> edges, std::uint64_t step,
               NodeId next_id) {
    nodes_ = std::move(nodes);
    edges_ = std::move(edges);
    step_ = step;
    next_id_ = next_id;
    rebuild_alias_index();
  }

  std::vector<NodeId> undirected_neighbors(NodeId id) const {
    std::set<NodeId> out;
    for (const auto& [k, e] : edges_) {
      if (e.head == id && e.tail != id) out.insert(e.tail);
      if (e.tail == id && e.head != id) out.insert(e.head);
    }
    return {out.begin(), out.end()};
  }

  std::map<NodeId, std::size_t> degrees() const {
    std::map<NodeId, std::size_t> deg;
    for (const auto& [id, n] : nodes_) deg[id] = 0;
    for (const auto& [k, e] : edges_) {
      ++deg[e.head];
      if (e.tail != e.head) ++deg[e.tail];
    }
    return deg;
  }

  friend bool operator==(const KnowledgeGraph& a, const KnowledgeGraph& b) {
    return a.nodes_ == b.nodes_ && a.edges_ == b.edges_ && a.step_ == b.step_ && a.next_id_ == b.next_id_;
  }

 private:
  void index_aliases(const EntityNode& n) {
    for (const auto& a : n.aliases) {
      auto key = normalize_phrase(a);
      if (key.empty()) continue;
      auto [it, inserted] = alias_index_.emplace(key, n.id);
      if (!inserted && n.id < it->second) it->second = n.id;
    }
  }

  void rebuild_alias_index() {
    alias_index_.clear();
    for (const auto& [id, n] : nodes_) index_aliases(n);
  }

  GraphConfig config_;
  std::map<NodeId, EntityNode> nodes_;
  std::map<EdgeKey, RelationEdge> edges_;
  std::map<std::string, NodeId> alias_index_;
  std::uint64_t step_ = 0;
  NodeId next_id_ = 0;
};

// ---------------------------------------------------------------------------
// Extraction

struct CandidateEntity {
  std::string canonical;
  std::string etype;
  double confidence = 0.0;
  Span span;
  std::string doc_id;
  std::string surface;
  std::string sentence;
  bool coref_rewritten = false;
  friend bool operator==(const CandidateEntity&, const CandidateEntity&) = default;
};

struct CandidateRelation {
  std::string head;
  std::string rel;
  std::string tail;
  double confidence = 0.0;
  std::string doc_id;
  friend bool operator==(const CandidateRelation&, const CandidateRelation&) = default;
};

struct ExtractionResult {
  std::vector<CandidateEntity> entities;
  std::vector<CandidateRelation> relations;
  std::vector<std::pair<Span, std::string>> coref_map;  // mention span -> canonical
  std::size_t dropped_entities = 0;
  std::size_t dropped_relations = 0;
  friend bool operator==(const ExtractionResult&, const ExtractionResult&) = default;
};

inline constexpr double kHeuristicEntityConfidence = 0.9;
inline constexpr double kHeuristicRelationConfidence = 0.7;

/// The sentence (split on . ! ?) containing byte offset `pos`, trimmed.
inline std::string sentence_at(std::string_view text, std::size_t pos) {
  std::size_t b = pos;
  while (b > 0 && text[b - 1] != '.' && text[b - 1] != '!' && text[b - 1] != '?') --b;
  std::size_t e = pos;
  while (e < text.size() && text[e] != '.' && text[e] != '!' && text[e] != '?') ++e;
  while (b < e && text[b] == ' ') ++b;
  return std::string(text.substr(b, e - b));
}

namespace detail {

inline bool is_capitalized(std::string_view text, const Token& t) {
  const char c = text[t.begin];
  return c >= 'A' && c <= 'Z';
}

inline const std::set<std::string>& heuristic_stopwords() {
  static const std::set<std::string> words = {"a",     "an",   "the",  "it",  "this",  "that", "these",
                                              "those", "in",   "on",   "at",  "of",    "for",  "and",
                                              "but",   "or",   "we",   "they", "he",   "she",  "its",
                                              "there", "when", "while", "after", "before", "instruction",
                                              "remember"};
  return words;
}

/// Capitalized token runs as entities; "X <whitelisted phrase> Y" as relations.
inline ExtractionResult heuristic_extract(const Document& doc, const GraphConfig& cfg) {
  ExtractionResult out;
  const auto tokens = tokenize(doc.text);
  struct Run {
    std::size_t first, last;  // token indices, inclusive
  };
  std::vector<Run> runs;
  for (std::size_t i = 0; i < tokens.size();) {
    if (!is_capitalized(doc.text, tokens[i]) || heuristic_stopwords().contains(tokens[i].text)) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < tokens.size() && is_capitalized(doc.text, tokens[j + 1]) &&
           tokens[j + 1].begin == tokens[j].end + 1 && doc.text[tokens[j].end] == ' ')
      ++j;
    runs.push_back({i, j});
    i = j + 1;
  }
  std::vector<std::string> names;
  for (const auto& r : runs) {
    const Span span{tokens[r.first].begin, tokens[r.last].end};
    std::string surface = doc.text.substr(span.begin, span.end - span.begin);
    names.push_back(surface);
    out.entities.push_back(CandidateEntity{surface, "ENTITY", kHeuristicEntityConfidence, span, doc.id, surface,
                                           sentence_at(doc.text, span.begin), false});
  }
  for (std::size_t r = 0; r + 1 < runs.size(); ++r) {
    const std::size_t gap_begin = runs[r].last + 1;
    const std::size_t gap_end = runs[r + 1].first;
    if (gap_begin >= gap_end) continue;
    // Runs must lie in the same sentence.
    const std::string_view between(doc.text.data() + tokens[runs[r].last].end,
                                   tokens[runs[r + 1].first].begin - tokens[runs[r].last].end);
    if (between.find_first_of(".!?") != std::string_view::npos) continue;
    std::string phrase;
    for (std::size_t k = gap_begin; k < gap_end; ++k) {
      if (!phrase.empty()) phrase.push_back(' ');
      phrase += tokens[k].text;
    }
    if (cfg.relation_whitelist.contains(phrase)) {
      out.relations.push_back(
          CandidateRelation{names[r], phrase, names[r + 1], kHeuristicRelationConfidence, doc.id});
    }
  }
  return out;
}

}  // namespace detail

/// Candidate entities/relations of one document. Gold annotations are used
/// when present, otherwise the heuristic extractor. Entities below the NER
/// threshold and relations outside the whitelist are dropped here.
inline ExtractionResult extract(const Document& doc, const GraphConfig& cfg) {
  ExtractionResult raw;
  if (doc.gold) {
    for (const auto& e : doc.gold->entities) {
      const bool in_bounds = e.span.end <= doc.text.size() && e.span.begin < e.span.end;
      const std::string surface = in_bounds ? doc.text.substr(e.span.begin, e.span.end - e.span.begin) : e.canonical;
      raw.entities.push_back(CandidateEntity{e.canonical, e.type, e.confidence, e.span, doc.id, surface,
                                             in_bounds ? sentence_at(doc.text, e.span.begin) : std::string(), false});
    }
    for (const auto& r : doc.gold->relations)
      raw.relations.push_back(CandidateRelation{r.head, r.rel, r.tail, r.confidence, doc.id});
    for (const auto& chain : doc.gold->coref_chains) {
      // The chain's canonical is the first chain span that is an annotated entity.
      std::optional<std::string> canonical;
      for (const auto& s : chain) {
        for (const auto& e : doc.gold->entities) {
          if (e.span == s) {
            canonical = e.canonical;
            break;
          }
        }
        if (canonical) break;
      }
      if (!canonical) continue;
      for (const auto& s : chain) raw.coref_map.emplace_back(s, *canonical);
    }
  } else {
    raw = detail::heuristic_extract(doc, cfg);
  }

  ExtractionResult out;
  out.coref_map = std::move(raw.coref_map);
  for (auto& e : raw.entities) {
    if (e.confidence >= cfg.ner_threshold) out.entities.push_back(std::move(e));
    else ++out.dropped_entities;
  }
  for (auto& r : raw.relations) {
    if (cfg.relation_whitelist.contains(r.rel)) out.relations.push_back(std::move(r));
    else ++out.dropped_relations;
  }
  return out;
}

/// Rewrites every chain mention to the chain's canonical entity and redirects
/// relation endpoints that named a rewritten mention.
inline ExtractionResult apply_coref(ExtractionResult ext, const Document& doc) {
  (void)doc;
  if (ext.coref_map.empty()) return ext;
  std::map<std::string, std::string> redirect;
  for (auto& e : ext.entities) {
    for (const auto& [span, canonical] : ext.coref_map) {
      if (e.span == span && e.canonical != canonical) {
        redirect[e.canonical] = canonical;
        e.canonical = canonical;
        e.coref_rewritten = true;
        break;
      }
    }
  }
  // Take the rewritten mentions' type from the canonical mention.
  for (auto& e : ext.entities) {
    if (!e.coref_rewritten) continue;
    for (const auto& o : ext.entities) {
      if (!o.coref_rewritten && o.canonical == e.canonical) {
        e.etype = o.etype;
        break;
      }
    }
  }
  for (auto& r : ext.relations) {
    if (auto it = redirect.find(r.head); it != redirect.end()) r.head = it->second;
    if (auto it = redirect.find(r.tail); it != redirect.end()) r.tail = it->second;
  }
  return ext;
}

// ---------------------------------------------------------------------------
// Update, merge, prune

struct UpdateStats {
  std::size_t nodes_added = 0;
  std::size_t mentions_matched = 0;
  std::size_t edges_added = 0;
  std::size_t edges_reinforced = 0;
  std::size_t relations_rejected = 0;       // confidence <= edge threshold
  std::size_t relations_missing_entity = 0; // endpoint not in graph
  std::size_t relations_self = 0;
  std::size_t merges = 0;
};

namespace detail {

/// Repeatedly merges the most similar pair above the threshold among pairs
/// touching at least one node of `dirty` (all pairs when `dirty` is empty and
/// `all` is set). The survivor keeps the lower id and becomes dirty.
inline std::size_t merge_pass(KnowledgeGraph& g, std::set<NodeId> dirty, bool all) {
  std::size_t merges = 0;
  const double thr = g.config().merge_threshold;
  while (true) {
    double best = thr;
    std::optional<std::pair<NodeId, NodeId>> pick;
    const auto& nodes = g.nodes();
    for (auto a = nodes.begin(); a != nodes.end(); ++a) {
      if (norm2(a->second.embedding) == 0.0) continue;
      for (auto b = std::next(a); b != nodes.end(); ++b) {
        if (!all && !dirty.contains(a->first) && !dirty.contains(b->first)) continue;
        if (norm2(b->second.embedding) == 0.0) continue;
        const double s = cosine_similarity(a->second.embedding, b->second.embedding);
        // Iteration is in (lower id, higher id) order, so strict '>' keeps the
        // lexicographically smallest pair among ties.
        if (s > best) {
          best = s;
          pick = std::make_pair(a->first, b->first);
        }
      }
    }
    if (!pick) break;
    g.merge_nodes(pick->first, pick->second);
    dirty.erase(pick->second);
    dirty.insert(pick->first);
    ++merges;
  }
  return merges;
}

}  // namespace detail

/// Merges node pairs with cosine similarity above the merge threshold until
/// none remains, most similar pair first.
inline KnowledgeGraph merge_entities(KnowledgeGraph g) {
  detail::merge_pass(g, {}, true);
  return g;
}

/// Initial node embedding: canonical-string features plus down-weighted
/// source-sentence features, L2-normalized.
inline std::vector<double> entity_embedding(const std::string& canonical, const std::string& sentence,
                                            const GraphConfig& cfg) {
  const auto emb = cfg.embedder();
  std::vector<double> v = emb.embed(canonical);
  if (!sentence.empty() && cfg.context_weight > 0.0) {
    const auto s = emb.embed(sentence);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += cfg.context_weight * s[i];
  }
  const double n = norm2(v);
  if (n > 0.0)
    for (double& x : v) x /= n;
  return v;
}

/// G <- G ∪ Merge(ext). `ext` must already be coref-resolved.
inline KnowledgeGraph update_graph(KnowledgeGraph g, const ExtractionResult& ext, UpdateStats* stats = nullptr) {
  UpdateStats local;
  UpdateStats& st = stats ? *stats : local;
  const auto& cfg = g.config();
  std::set<NodeId> inserted;

  for (const auto& e : ext.entities) {
    if (auto id = g.find_alias(e.canonical)) {
      auto& n = g.mutable_nodes().at(*id);
      n.frequency += 1;
      n.sources.insert(e.doc_id);
      if (!e.coref_rewritten && !e.surface.empty() && !g.find_alias(e.surface)) g.add_alias(*id, e.surface);
      ++st.mentions_matched;
      continue;
    }
    EntityNode n;
    n.canonical = e.canonical;
    n.etype = e.etype;
    n.embedding = entity_embedding(e.canonical, e.sentence, cfg);
    n.frequency = 1;
    n.sources.insert(e.doc_id);
    if (!e.coref_rewritten && !e.surface.empty() && !g.find_alias(e.surface)) n.aliases.insert(e.surface);
    inserted.insert(g.add_node(std::move(n)));
    ++st.nodes_added;
  }

  for (const auto& r : ext.relations) {
    if (!(r.confidence > cfg.edge_threshold)) {
      ++st.relations_rejected;
      continue;
    }
    const auto head = g.find_alias(r.head);
    const auto tail = g.find_alias(r.tail);
    if (!head || !tail) {
      ++st.relations_missing_entity;
      continue;
    }
    if (*head == *tail && !cfg.allow_self_relations) {
      ++st.relations_self;
      continue;
    }
    const auto before = g.edges().find(EdgeKey{*head, r.rel, *tail});
    const bool existed = before != g.edges().end();
    const std::size_t w = existed ? before->second.weight : 0;
    g.observe_edge(*head, r.rel, *tail, r.confidence, r.doc_id);
    if (!existed) ++st.edges_added;
    else if (g.edges().at(EdgeKey{*head, r.rel, *tail}).weight > w) ++st.edges_reinforced;
  }

  if (!inserted.empty()) st.merges += detail::merge_pass(g, inserted, false);
  g.advance_step();
  return g;
}

/// Removes nodes with degree <= prune_max_degree and frequency <=
/// prune_max_freq along with their edges, sweeping until no node qualifies.
inline KnowledgeGraph prune_graph(KnowledgeGraph g) {
  const auto& cfg = g.config();
  while (true) {
    std::vector<NodeId> victims;
    for (const auto& [id, deg] : g.degrees()) {
      if (deg <= cfg.prune_max_degree && g.nodes().at(id).frequency <= cfg.prune_max_freq) victims.push_back(id);
    }
    if (victims.empty()) break;
    for (NodeId id : victims) g.remove_node(id);
  }
  return g;
}

/// Appends one domain's documents to `g`: extract -> coref -> update per
/// document, then a single prune.
inline KnowledgeGraph ingest_documents(KnowledgeGraph g, const std::vector<Document>& docs,
                                       UpdateStats* stats = nullptr) {
  for (const auto& doc : docs) {
    const auto violations = validate_document(doc, 0);
    if (!violations.empty()) throw Error("document " + doc.id + ": " + violations.front());
  }
  for (const auto& doc : docs) g = update_graph(std::move(g), apply_coref(extract(doc, g.config()), doc), stats);
  return prune_graph(std::move(g));
}

inline KnowledgeGraph build_graph(const std::vector<Document>& docs, const GraphConfig& cfg,
                                  UpdateStats* stats = nullptr) {
  cfg.validate();
  return ingest_documents(KnowledgeGraph(cfg), docs, stats);
}

struct GraphStats {
  std::size_t nodes = 0;
  std::size_t edges = 0;
  double mean_degree = 0.0;
  std::map<std::size_t, std::size_t> weight_histogram;
  std::uint64_t step = 0;
};

inline GraphStats graph_stats(const KnowledgeGraph& g) {
  GraphStats s;
  s.nodes = g.nodes().size();
  s.edges = g.edges().size();
  s.mean_degree = s.nodes == 0 ? 0.0 : 2.0 * static_cast<double>(s.edges) / static_cast<double>(s.nodes);
  for (const auto& [k, e] : g.edges()) ++s.weight_histogram[e.weight];
  s.step = g.step();
  return s;
}

// ---------------------------------------------------------------------------
// Persistence: a header record, node records by id, edge records by
// (head, rel, tail). One JSON object per line.

namespace detail {

inline nlohmann::ordered_json graph_config_to_json(const GraphConfig& c) {
  nlohmann::ordered_json j;
  j["ner_threshold"] = c.ner_threshold;
  j["edge_threshold"] = c.edge_threshold;
  j["merge_threshold"] = c.merge_threshold;
  j["relation_whitelist"] = c.relation_whitelist;
  j["prune_max_degree"] = c.prune_max_degree;
  j["prune_max_freq"] = c.prune_max_freq;
  j["embed_dim"] = c.embed_dim;
  j["embed_seed"] = c.embed_seed;
  j["allow_self_relations"] = c.allow_self_relations;
  j["context_weight"] = c.context_weight;
  return j;
}

inline GraphConfig graph_config_from_json(const nlohmann::json& j) {
  GraphConfig c;
  c.ner_threshold = j.at("ner_threshold").get<double>();
  c.edge_threshold = j.at("edge_threshold").get<double>();
  c.merge_threshold = j.at("merge_threshold").get<double>();
  c.relation_whitelist = j.at("relation_whitelist").get<std::set<std::string>>();
  c.prune_max_degree = j.at("prune_max_degree").get<std::size_t>();
  c.prune_max_freq = j.at("prune_max_freq").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.embed_seed = j.at("embed_seed").get<std::uint64_t>();
  c.allow_self_relations = j.at("allow_self_relations").get<bool>();
  c.context_weight = j.at("context_weight").get<double>();
  return c;
}

}  // namespace detail

inline void write_graph(std::ostream& out, const KnowledgeGraph& g) {
  nlohmann::ordered_json header;
  header["record"] = "graph";
  header["step"] = g.step();
  header["next_id"] = g.next_id();
  header["nodes"] = g.nodes().size();
  header["edges"] = g.edges().size();
  header["config"] = detail::graph_config_to_json(g.config());
  out << header.dump() << '\n';
  for (const auto& [id, n] : g.nodes()) {
    nlohmann::ordered_json j;
    j["record"] = "node";
    j["id"] = n.id;
    j["canonical"] = n.canonical;
    j["aliases"] = n.aliases;
    j["etype"] = n.etype;
    j["frequency"] = n.frequency;
    j["sources"] = n.sources;
    j["embedding"] = n.embedding;
    j["gat_embedding"] = n.gat_embedding;
    out << j.dump() << '\n';
  }
  for (const auto& [k, e] : g.edges()) {
    nlohmann::ordered_json j;
    j["record"] = "edge";
    j["head"] = e.head;
    j["rel"] = e.rel;
    j["tail"] = e.tail;
    j["confidence"] = e.confidence;
    j["weight"] = e.weight;
    j["sources"] = e.sources;
    out << j.dump() << '\n';
  }
}

inline KnowledgeGraph read_graph(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&lineno](const std::string& why) {
    return Error("graph record " + std::to_string(lineno) + ": " + why);
  };
  auto parse = [&](const std::string& expected) {
    if (!std::getline(in, line)) throw fail("unexpected end of file (expected " + expected + " record)");
    ++lineno;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw fail("malformed record");
    }
    if (!j.is_object() || j.value("record", "") != expected) throw fail("expected " + expected + " record");
    return j;
  };

  try {
    auto header = parse("graph");
    GraphConfig cfg = detail::graph_config_from_json(header.at("config"));
    const auto n_nodes = header.at("nodes").get<std::size_t>();
    const auto n_edges = header.at("edges").get<std::size_t>();
    std::map<NodeId, EntityNode> nodes;
    for (std::size_t i = 0; i < n_nodes; ++i) {
      auto j = parse("node");
      EntityNode n;
      n.id = j.at("id").get<NodeId>();
      n.canonical = j.at("canonical").get<std::string>();
      n.aliases = j.at("aliases").get<std::set<std::string>>();
      n.etype = j.at("etype").get<std::string>();
      n.frequency = j.at("frequency").get<std::size_t>();
      n.sources = j.at("sources").get<std::set<std::string>>();
      n.embedding = j.at("embedding").get<std::vector<double>>();
      n.gat_embedding = j.at("gat_embedding").get<std::vector<double>>();
      if (n.embedding.size() != cfg.embed_dim) throw fail("embedding dimension mismatch");
      if (!nodes.emplace(n.id, std::move(n)).second) throw fail("duplicate node id");
    }
    std::map<EdgeKey, RelationEdge> edges;
    for (std::size_t i = 0; i < n_edges; ++i) {
      auto j = parse("edge");
      RelationEdge e;
      e.head = j.at("head").get<NodeId>();
      e.rel = j.at("rel").get<std::string>();
      e.tail = j.at("tail").get<NodeId>();
      e.confidence = j.at("confidence").get<double>();
      e.weight = j.at("weight").get<std::size_t>();
      e.sources = j.at("sources").get<std::set<std::string>>();
      if (!nodes.contains(e.head) || !nodes.contains(e.tail)) throw fail("edge endpoint not a node");
      if (!edges.emplace(EdgeKey{e.head, e.rel, e.tail}, std::move(e)).second) throw fail("duplicate edge");
    }
    KnowledgeGraph g(cfg);
    g.restore(std::move(nodes), std::move(edges), header.at("step").get<std::uint64_t>(),
              header.at("next_id").get<NodeId>());
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad field: ") + e.what());
  }
}

inline void save_graph(const KnowledgeGraph& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write graph file: " + path);
  write_graph(out, g);
}

inline KnowledgeGraph load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open graph file: " + path);
  return read_graph(in);
}

/// Serializes to `path` and reads it back.
inline KnowledgeGraph persist_roundtrip(const KnowledgeGraph& g, const std::string& path) {
  save_graph(g, path);
  return load_graph(path);
}

inline std::string to_dot(const KnowledgeGraph& g) {
  auto esc = [](const std::string& s) {
    std::string o;
    for (char c : s) {
      if (c == '"' || c == '\\') o.push_back('\\');
      o.push_back(c);
    }
    return o;
  };
  std::ostringstream out;
  out << "digraph kg {\n";
  for (const auto& [id, n] : g.nodes())
    out << "  n" << id << " [label=\"" << esc(n.canonical) << "\", freq=" << n.frequency << "];\n";
  for (const auto& [k, e] : g.edges())
    out << "  n" << e.head << " -> n" << e.tail << " [label=\"" << esc(e.rel) << "\", weight=" << e.weight << "];\n";
  out << "}\n";
  return out.str();
}

}  // namespace kilo
