#pragma once

// Sequential adaptation over a list of domains: replay mixing, logit
// distillation against the previous domain's snapshot, post-domain graph
// update and GAT re-encoding, and per-domain evaluation of every domain.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "kilo/core.hpp"
#include "kilo/corpus.hpp"
#include "kilo/gat.hpp"
#include "kilo/kgraph.hpp"
#include "kilo/learner.hpp"
#include "kilo/metrics.hpp"
#include "kilo/retrieval.hpp"

namespace kilo {

enum class ReplayStrategy { reservoir, coverage };
enum class EvalMetric { macro_f1, accuracy };

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t epochs = 3;
  double replay_fraction = 0.10;
  std::size_t early_stop_patience = 1;
  std::size_t buffer_capacity = 200;
  double split_train = 0.8;
  double split_val = 0.1;
  double split_test = 0.1;
  EvalMetric metric = EvalMetric::macro_f1;
  bool train_gat = true;
  std::size_t gat_epochs = 1;
  double gat_lr = 0.005;

  void validate() const {
    if (batch_size < 1) throw UsageError("train.batch_size must be >= 1");
    if (epochs < 1) throw UsageError("train.epochs must be >= 1");
    if (!(replay_fraction >= 0.0 && replay_fraction < 1.0)) throw UsageError("train.replay_fraction must be in [0,1)");
    if (buffer_capacity < 1) throw UsageError("train.buffer_capacity must be >= 1");
  }
};

struct AblationFlags {
  bool use_kg = true;
  bool use_prompt = true;
  bool use_replay = true;
  bool use_distill = true;

  void validate() const {
    if (use_prompt && !use_kg) throw UsageError("flags: use_prompt requires use_kg");
  }

  /// kilo: everything on; naive: continual fine-tuning; no-kg / no-prompt:
  /// the two ablations.
  static AblationFlags for_method(const std::string& method) {
    if (method == "kilo") return {true, true, true, true};
    if (method == "naive") return {false, false, false, false};
    if (method == "no-kg") return {false, false, true, true};
    if (method == "no-prompt") return {true, false, true, true};
    throw UsageError("unknown method '" + method + "' (expected kilo|naive|no-kg|no-prompt)");
  }

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct LearnerConfig {
  FeatureEmbedder embedder{256, 0};
  LearnerMode mode = LearnerMode::linear;
  std::size_t hidden = 32;
  AdamWConfig adamw;
};

struct ExperimentConfig {
  GraphConfig graph;
  GatConfig gat;
  RetrievalConfig retrieval;
  LearnerConfig learner;
  LossConfig loss;
  TrainConfig train;
  AblationFlags flags;
  std::uint64_t seed = 0;

  void validate() const {
    graph.validate();
    gat.validate();
    retrieval.validate();
    learner.embedder.validate();
    loss.validate();
    train.validate();
    flags.validate();
    if (gat.in_dim != graph.embed_dim)
      throw UsageError("gat.in_dim must equal graph.embed_dim (node features are raw node embeddings)");
  }
};

// ---------------------------------------------------------------------------
// Replay

struct ReplayBuffer {
  std::size_t capacity = 200;
  std::vector<std::pair<std::string, std::vector<Document>>> stores;  // task order

  bool empty() const {
    for (const auto& [task, docs] : stores)
      if (!docs.empty()) return false;
    return true;
  }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [task, docs] : stores) n += docs.size();
    return n;
  }
};

namespace detail {

inline std::vector<std::size_t> reservoir_indices(std::size_t n, std::size_t capacity, Rng& rng) {
  std::vector<std::size_t> res;
  for (std::size_t i = 0; i < n; ++i) {
    if (res.size() < capacity) {
      res.push_back(i);
    } else {
      const std::size_t j = rng.below(i + 1);
      if (j < capacity) res[j] = i;
    }
  }
  std::sort(res.begin(), res.end());
  return res;
}

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace detail

/// Mean GAT embedding of a document's linked entities; empty when nothing links.
inline std::vector<double> document_entity_embedding(const Document& doc, const KnowledgeGraph& g) {
  return mention_query(g, link_entities(doc.text, g));
}

/// Up to `capacity` exemplars, returned in corpus order. Coverage selection
/// starts from the farthest pair of linked documents and then adds the
/// document farthest from the selected set (ties by document id); unlinked
/// documents fill any remaining capacity by reservoir sampling.
inline std::vector<Document> select_exemplars(const std::vector<Document>& corpus, const KnowledgeGraph& g,
                                              ReplayStrategy strategy, std::size_t capacity, std::uint64_t seed) {
  if (capacity < 1) throw Error("select_exemplars: capacity must be >= 1");
  if (corpus.size() <= capacity) return corpus;
  Rng rng(seed);
  std::vector<std::size_t> chosen;
  if (strategy == ReplayStrategy::reservoir) {
    chosen = detail::reservoir_indices(corpus.size(), capacity, rng);
  } else {
    std::vector<std::size_t> linked, unlinked;
    std::vector<std::vector<double>> emb(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      emb[i] = document_entity_embedding(corpus[i], g);
      (emb[i].empty() ? unlinked : linked).push_back(i);
    }
    // Candidates in document-id order so "first wins" is the id tie-break.
    std::sort(linked.begin(), linked.end(), [&](std::size_t a, std::size_t b) { return corpus[a].id < corpus[b].id; });
    std::vector<std::size_t> picked;
    if (linked.size() <= capacity) {
      picked = linked;
    } else {
      double best = -1.0;
      std::size_t ba = 0, bb = 0;
      for (std::size_t x = 0; x < linked.size(); ++x)
        for (std::size_t y = x + 1; y < linked.size(); ++y) {
          const double d = detail::euclidean(emb[linked[x]], emb[linked[y]]);
          if (d > best) {
            best = d;
            ba = x;
            bb = y;
          }
        }
      std::vector<bool> taken(linked.size(), false);
      std::vector<double> mind(linked.size(), std::numeric_limits<double>::infinity());
      auto take = [&](std::size_t x) {
        taken[x] = true;
        picked.push_back(linked[x]);
        for (std::size_t y = 0; y < linked.size(); ++y)
          if (!taken[y]) mind[y] = std::min(mind[y], detail::euclidean(emb[linked[x]], emb[linked[y]]));
      };
      take(ba);
      if (capacity > 1) take(bb);
      while (picked.size() < capacity) {
        std::size_t arg = linked.size();
        for (std::size_t y = 0; y < linked.size(); ++y)
          if (!taken[y] && (arg == linked.size() || mind[y] > mind[arg])) arg = y;
        take(arg);
      }
    }
    if (picked.size() < capacity && !unlinked.empty()) {
      for (std::size_t k : detail::reservoir_indices(unlinked.size(), capacity - picked.size(), rng))
        picked.push_back(unlinked[k]);
    }
    chosen = std::move(picked);
    std::sort(chosen.begin(), chosen.end());
  }
  std::vector<Document> out;
  for (std::size_t i : chosen) out.push_back(corpus[i]);
  return out;
}

/// round_half_up(batch * fraction), at least 1 with a non-empty buffer, 0 with
/// an empty one, and never the whole batch.
inline std::size_t replay_count(const TrainConfig& cfg, bool buffer_nonempty) {
  if (!buffer_nonempty || cfg.batch_size < 2) return 0;
  auto r = static_cast<std::size_t>(std::floor(static_cast<double>(cfg.batch_size) * cfg.replay_fraction + 0.5));
  r = std::max<std::size_t>(r, 1);
  return std::min(r, cfg.batch_size - 1);
}

/// Current-domain documents plus replayed exemplars drawn round-robin over
/// past tasks (`cursor` persists across batches).
inline std::vector<Document> compose_batch(const std::vector<Document>& current, const ReplayBuffer& buffer,
                                           const TrainConfig& cfg, std::size_t& cursor, Rng& rng,
                                           bool use_replay = true) {
  if (current.empty()) throw Error("compose_batch: current documents must be non-empty");
  std::vector<Document> batch(current.begin(), current.end());
  const std::size_t r = use_replay ? replay_count(cfg, !buffer.empty()) : 0;
  std::vector<const std::vector<Document>*> tasks;
  for (const auto& [name, docs] : buffer.stores)
    if (!docs.empty()) tasks.push_back(&docs);
  for (std::size_t k = 0; k < r && !tasks.empty(); ++k) {
    const auto& store = *tasks[cursor++ % tasks.size()];
    batch.push_back(store[rng.below(store.size())]);
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Run state

struct DomainRecord {
  std::string name;
  double wall_seconds = 0.0;
  std::size_t epochs_run = 0;
  double final_val_loss = 0.0;
  double first_batch_loss = 0.0;
  std::vector<double> epoch_train_loss;
  double cost_units = 0.0;
  std::size_t buffer_size = 0;
  std::size_t graph_nodes = 0;
  std::size_t graph_edges = 0;
  std::size_t prompted_train_inputs = 0;
  double param_drift = 0.0;  // |theta_t - theta_{t-1}|_2
};

struct RunRecord {
  std::vector<DomainRecord> domains;
  AccuracyMatrix matrix;
  std::uint64_t seed = 0;
  std::string config_hash;

  double total_cost() const {
    double c = 0.0;
    for (const auto& d : domains) c += d.cost_units;
    return c;
  }
  double total_wall_seconds() const {
    double s = 0.0;
    for (const auto& d : domains) s += d.wall_seconds;
    return s;
  }
};

struct RunState {
  ExperimentConfig config;
  std::vector<DomainCorpus> domains;
  std::vector<CorpusSplit> splits;
  std::size_t classes = 2;

  LearnerParams params;
  std::optional<TeacherSnapshot> teacher;
  KnowledgeGraph graph;
  GatParams gat;
  AdamWState gat_opt;
  ReplayBuffer buffer;
  std::size_t replay_cursor = 0;
  std::size_t trained = 0;  // domains trained so far

  RunRecord record;
  std::map<std::string, Example> example_cache;  // valid for the current graph
};

namespace detail {

inline double param_distance(const LearnerParams& a, const LearnerParams& b) {
  const auto ta = a.tensors();
  const auto tb = b.tensors();
  double s = 0.0;
  for (std::size_t i = 0; i < ta.size(); ++i)
    for (std::size_t k = 0; k < ta[i].size(); ++k) s += (ta[i][k] - tb[i][k]) * (ta[i][k] - tb[i][k]);
  return std::sqrt(s);
}

}  // namespace detail

/// Model input text for a document, prefixed with retrieved facts when prompts are on.
inline std::string model_input(const RunState& st, const std::string& text, bool* prompted = nullptr) {
  const auto& f = st.config.flags;
  if (f.use_kg && f.use_prompt && !st.graph.empty()) {
    auto bundle = build_prompt(text, st.graph, st.config.retrieval);
    if (prompted) *prompted = bundle.triples_used > 0;
    return std::move(bundle.augmented_input);
  }
  if (prompted) *prompted = false;
  return text;
}

inline const Example& example_for(RunState& st, const Document& doc, bool* prompted = nullptr) {
  auto it = st.example_cache.find(doc.id);
  if (it != st.example_cache.end()) {
    if (prompted) *prompted = false;
    return it->second;
  }
  Example ex{st.config.learner.embedder.embed(model_input(st, doc.text, prompted)), doc.label};
  return st.example_cache.emplace(doc.id, std::move(ex)).first->second;
}

/// Scores `docs` with the current model (macro-F1 or accuracy, in percent).
inline double evaluate_documents(RunState& st, const std::vector<Document>& docs) {
  if (docs.empty()) return 0.0;
  std::vector<std::size_t> preds, golds;
  for (const auto& d : docs) {
    preds.push_back(predict(st.params, example_for(st, d).x));
    golds.push_back(d.label);
  }
  return st.config.train.metric == EvalMetric::macro_f1 ? macro_f1(preds, golds, st.classes)
                                                        : accuracy_percent(preds, golds);
}

inline std::vector<double> evaluate_all(RunState& st) {
  std::vector<double> row;
  for (const auto& s : st.splits) row.push_back(evaluate_documents(st, s.test));
  return row;
}

inline double mean_task_loss(RunState& st, const std::vector<Document>& docs) {
  if (docs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& d : docs) {
    const auto& ex = example_for(st, d);
    s += cross_entropy_loss(forward_logits(st.params, ex.x), ex.label);
  }
  return s / static_cast<double>(docs.size());
}

namespace detail {

/// Trains the learner on `docs` without replay, distillation or prompts
/// (used for the optional source-domain phase).
inline void pretrain_source(RunState& st, const std::vector<Document>& docs) {
  const auto& cfg = st.config;
  AdamWState opt(cfg.learner.adamw);
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    std::vector<std::size_t> order(docs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, "source-epoch", epoch));
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += cfg.train.batch_size) {
      std::vector<Example> batch;
      for (std::size_t k = b; k < std::min(order.size(), b + cfg.train.batch_size); ++k)
        batch.push_back(Example{cfg.learner.embedder.embed(docs[order[k]].text), docs[order[k]].label});
      auto r = combined_loss_and_grads(st.params, nullptr, batch, cfg.loss);
      adamw_step(st.params, r.grads, opt);
    }
  }
}

}  // namespace detail

/// Splits every domain, initializes the learner, an empty graph and buffer,
/// optionally trains on a source domain, and records the baseline row.
inline RunState init_run(const std::vector<DomainCorpus>& domains, const ExperimentConfig& config,
                         const std::optional<DomainCorpus>& source = std::nullopt) {
  if (domains.empty()) throw Error("init_run: no domains");
  config.validate();
  RunState st;
  st.config = config;
  st.domains = domains;
  std::size_t classes = infer_class_count(domains);
  if (source) classes = std::max(classes, infer_class_count({*source}));
  st.classes = classes;
  for (std::size_t t = 0; t < domains.size(); ++t) {
    const auto& tc = config.train;
    st.splits.push_back(split_corpus(domains[t].docs, tc.split_train, tc.split_val, tc.split_test,
                                     derive_seed(config.seed, "split", t)));
  }
  const auto& lc = config.learner;
  st.params = LearnerParams::random(lc.mode, classes, lc.embedder.dim, lc.hidden, derive_seed(config.seed, "learner"));
  st.graph = KnowledgeGraph(config.graph);
  GatConfig gc = config.gat;
  gc.seed = derive_seed(config.seed, "gat", gc.seed);
  st.gat = init_params(gc);
  AdamWConfig gopt;
  gopt.lr = config.train.gat_lr;
  st.gat_opt = AdamWState(gopt);
  st.buffer.capacity = config.train.buffer_capacity;
  if (source) detail::pretrain_source(st, source->docs);

  st.record.seed = config.seed;
  for (const auto& d : domains) st.record.matrix.domains.push_back(d.name);
  st.record.matrix.rows.push_back(evaluate_all(st));
  return st;
}

/// Trains the next domain in sequence and appends its evaluation row.
inline void train_domain(RunState& st) {
  if (st.trained >= st.domains.size()) throw Error("train_domain: all domains already trained");
  const std::size_t t = st.trained;  // 0-based
  const auto& cfg = st.config;
  const auto& flags = cfg.flags;
  const auto& split = st.splits[t];
  const auto start = std::chrono::steady_clock::now();

  DomainRecord rec;
  rec.name = st.domains[t].name;
  const LearnerParams before = st.params;
  AdamWState opt(cfg.learner.adamw);
  const TeacherSnapshot* teacher = (flags.use_distill && st.teacher) ? &*st.teacher : nullptr;
  const std::size_t r = flags.use_replay ? replay_count(cfg.train, !st.buffer.empty()) : 0;
  const std::size_t current_per_batch = cfg.train.batch_size - r;
  Rng replay_rng(derive_seed(cfg.seed, "replay", t));

  std::set<std::string> prompted_ids;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
  bool first_batch = true;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    std::vector<std::size_t> order(split.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, "epoch", t * 1000 + epoch));
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += current_per_batch) {
      std::vector<Document> current;
      for (std::size_t k = b; k < std::min(order.size(), b + current_per_batch); ++k)
        current.push_back(split.train[order[k]]);
      const auto docs = compose_batch(current, st.buffer, cfg.train, st.replay_cursor, replay_rng, flags.use_replay);
      std::vector<Example> batch;
      batch.reserve(docs.size());
      for (const auto& d : docs) {
        bool prompted = false;
        batch.push_back(example_for(st, d, &prompted));
        if (prompted) prompted_ids.insert(d.id);
      }
      auto res = combined_loss_and_grads(st.params, teacher, batch, cfg.loss);
      if (first_batch) {
        rec.first_batch_loss = res.task_loss;
        first_batch = false;
      }
      epoch_loss += res.task_loss;
      ++batches;
      adamw_step(st.params, res.grads, opt);
      rec.cost_units += static_cast<double>(batch.size());
    }
    rec.epoch_train_loss.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
    ++rec.epochs_run;
    const double val = mean_task_loss(st, split.val);
    rec.final_val_loss = val;
    if (val < best_val) {
      best_val = val;
      bad_epochs = 0;
    } else if (++bad_epochs >= cfg.train.early_stop_patience) {
      break;
    }
  }
  rec.prompted_train_inputs = prompted_ids.size();
  rec.param_drift = detail::param_distance(st.params, before);

  if (flags.use_kg) {
    st.graph = ingest_documents(std::move(st.graph), split.train);
    rec.cost_units += static_cast<double>(split.train.size());
    if (cfg.train.train_gat) {
      for (std::size_t e = 0; e < cfg.train.gat_epochs; ++e) {
        const auto ls = train_link_reconstruction(st.graph, st.gat, st.gat_opt, derive_seed(cfg.seed, "gat-train", t * 100 + e));
        rec.cost_units += static_cast<double>(ls.pairs);
      }
    }
    encode_graph(st.graph, st.gat);
    st.example_cache.clear();
  }
  if (flags.use_replay) {
    const auto strategy = flags.use_kg ? ReplayStrategy::coverage : ReplayStrategy::reservoir;
    st.buffer.stores.emplace_back(rec.name, select_exemplars(split.train, st.graph, strategy, st.buffer.capacity,
                                                             derive_seed(cfg.seed, "exemplars", t)));
  }
  st.teacher.emplace(st.params);
  rec.buffer_size = st.buffer.total();
  rec.graph_nodes = st.graph.nodes().size();
  rec.graph_edges = st.graph.edges().size();
  st.record.matrix.rows.push_back(evaluate_all(st));
  const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
  rec.wall_seconds = std::max(elapsed.count(), 1e-9);
  st.record.domains.push_back(std::move(rec));
  ++st.trained;
}

using DomainObserver = std::function<void(const RunState&, std::size_t domain_index)>;

/// Full sequence: baseline row, then one row per trained domain.
inline RunRecord run_sequence(const std::vector<DomainCorpus>& domains, const ExperimentConfig& config,
                              const std::optional<DomainCorpus>& source = std::nullopt,
                              const DomainObserver& observer = {}) {
  RunState st = init_run(domains, config, source);
  for (std::size_t t = 0; t < domains.size(); ++t) {
    train_domain(st);
    if (observer) observer(st, t);
  }
  return st.record;
}

}  // namespace kilo
