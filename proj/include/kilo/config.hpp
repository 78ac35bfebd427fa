#pragma once

// Application settings: one JSON object of flat dotted keys merged over the
// defaults. Precedence is flags > environment > file > defaults.

#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kilo/continual.hpp"
#include "kilo/corpus.hpp"

namespace kilo {

struct AppConfig {
  ExperimentConfig exp;
  SyntheticConfig synth;
  std::string method = "kilo";
  std::string corpus_path;    // empty -> synthetic benchmark
  std::string source_domain;  // optional domain trained before the sequence
  std::string lexicon_path;
  std::string out_dir = "out";

  std::uint64_t seed() const { return exp.seed; }

  void set_seed(std::uint64_t s) {
    exp.seed = s;
    synth.seed = s;
  }

  void validate() const {
    exp.validate();
    synth.validate();
    AblationFlags::for_method(method);
  }
};

namespace detail {

using Json = nlohmann::json;

inline UsageError bad_value(const std::string& key, const std::string& why) {
  return UsageError("invalid value for key '" + key + "': " + why);
}

inline double as_double(const std::string& key, const Json& v) {
  if (!v.is_number()) throw bad_value(key, "expected a number");
  return v.get<double>();
}

inline std::size_t as_count(const std::string& key, const Json& v) {
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0) return static_cast<std::size_t>(v.get<long long>());
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (d >= 0.0 && d == std::floor(d)) return static_cast<std::size_t>(d);
  }
  throw bad_value(key, "expected a non-negative integer");
}

inline bool as_bool(const std::string& key, const Json& v) {
  if (!v.is_boolean()) throw bad_value(key, "expected true or false");
  return v.get<bool>();
}

inline std::string as_string(const std::string& key, const Json& v) {
  if (!v.is_string()) throw bad_value(key, "expected a string");
  return v.get<std::string>();
}

struct KeySpec {
  std::function<void(AppConfig&, const std::string&, const Json&)> set;
  std::function<nlohmann::ordered_json(const AppConfig&)> get;
};

#define KILO_KEY_NUM(name, field) \
  {name, {[](AppConfig& c, const std::string& k, const Json& v) { c.field = as_double(k, v); }, \
          [](const AppConfig& c) { return nlohmann::ordered_json(c.field); }}}
#define KILO_KEY_COUNT(name, field) \
  {name, {[](AppConfig& c, const std::string& k, const Json& v) { c.field = as_count(k, v); }, \
          [](const AppConfig& c) { return nlohmann::ordered_json(c.field); }}}
#define KILO_KEY_BOOL(name, field) \
  {name, {[](AppConfig& c, const std::string& k, const Json& v) { c.field = as_bool(k, v); }, \
          [](const AppConfig& c) { return nlohmann::ordered_json(c.field); }}}
#define KILO_KEY_STR(name, field) \
  {name, {[](AppConfig& c, const std::string& k, const Json& v) { c.field = as_string(k, v); }, \
          [](const AppConfig& c) { return nlohmann::ordered_json(c.field); }}}

inline const std::map<std::string, KeySpec>& key_table() {
  static const std::map<std::string, KeySpec> table = {
      {"seed",
       {[](AppConfig& c, const std::string& k, const Json& v) { c.set_seed(as_count(k, v)); },
        [](const AppConfig& c) { return nlohmann::ordered_json(c.exp.seed); }}},
      {"method",
       {[](AppConfig& c, const std::string& k, const Json& v) {
          const auto m = as_string(k, v);
          try {
            c.exp.flags = AblationFlags::for_method(m);
          } catch (const UsageError& e) {
            throw bad_value(k, e.what());
          }
          c.method = m;
        },
        [](const AppConfig& c) { return nlohmann::ordered_json(c.method); }}},
      KILO_KEY_STR("out", out_dir),
      KILO_KEY_STR("corpus.path", corpus_path),
      KILO_KEY_STR("corpus.source_domain", source_domain),

      KILO_KEY_COUNT("synth.n_domains", synth.n_domains),
      KILO_KEY_COUNT("synth.classes", synth.classes),
      KILO_KEY_COUNT("synth.docs_per_domain", synth.docs_per_domain),
      KILO_KEY_COUNT("synth.entities_per_domain", synth.entities_per_domain),
      KILO_KEY_NUM("synth.vocab_overlap", synth.vocab_overlap),
      KILO_KEY_NUM("synth.coupling", synth.coupling),
      KILO_KEY_NUM("synth.style_cue", synth.style_cue),

      KILO_KEY_NUM("graph.ner_threshold", exp.graph.ner_threshold),
      KILO_KEY_NUM("graph.edge_threshold", exp.graph.edge_threshold),
      KILO_KEY_NUM("graph.merge_threshold", exp.graph.merge_threshold),
      KILO_KEY_COUNT("graph.prune_max_degree", exp.graph.prune_max_degree),
      KILO_KEY_COUNT("graph.prune_max_freq", exp.graph.prune_max_freq),
      {"graph.embed_dim",
       {[](AppConfig& c, const std::string& k, const Json& v) {
          c.exp.graph.embed_dim = as_count(k, v);
          c.exp.gat.in_dim = c.exp.graph.embed_dim;
        },
        [](const AppConfig& c) { return nlohmann::ordered_json(c.exp.graph.embed_dim); }}},
      KILO_KEY_BOOL("graph.allow_self_relations", exp.graph.allow_self_relations),
      KILO_KEY_NUM("graph.context_weight", exp.graph.context_weight),
      {"graph.relations",
       {[](AppConfig& c, const std::string& k, const Json& v) {
          if (!v.is_array()) throw bad_value(k, "expected an array of relation labels");
          std::set<std::string> rels;
          for (const auto& r : v) rels.insert(as_string(k, r));
          c.exp.graph.relation_whitelist = std::move(rels);
        },
        [](const AppConfig& c) { return nlohmann::ordered_json(c.exp.graph.relation_whitelist); }}},

      KILO_KEY_COUNT("gat.heads", exp.gat.heads),
      KILO_KEY_COUNT("gat.hidden_dim", exp.gat.hidden_dim),
      KILO_KEY_COUNT("gat.out_dim", exp.gat.out_dim),
      KILO_KEY_NUM("gat.leaky_slope", exp.gat.leaky_slope),
      KILO_KEY_BOOL("gat.self_loops", exp.gat.add_self_loops),

      KILO_KEY_COUNT("retrieval.k", exp.retrieval.k),
      KILO_KEY_COUNT("retrieval.max_triples", exp.retrieval.max_triples),
      KILO_KEY_BOOL("retrieval.include_incoming", exp.retrieval.include_incoming),
      KILO_KEY_STR("retrieval.separator", exp.retrieval.separator),
      KILO_KEY_STR("retrieval.lexicon", lexicon_path),

      KILO_KEY_COUNT("learner.dim", exp.learner.embedder.dim),
      {"learner.mode",
       {[](AppConfig& c, const std::string& k, const Json& v) {
          const auto m = as_string(k, v);
          if (m == "linear") c.exp.learner.mode = LearnerMode::linear;
          else if (m == "mlp") c.exp.learner.mode = LearnerMode::mlp;
          else throw bad_value(k, "expected linear or mlp");
        },
        [](const AppConfig& c) {
          return nlohmann::ordered_json(c.exp.learner.mode == LearnerMode::mlp ? "mlp" : "linear");
        }}},
      KILO_KEY_COUNT("learner.hidden", exp.learner.hidden),
      KILO_KEY_NUM("learner.lr", exp.learner.adamw.lr),
      KILO_KEY_NUM("learner.weight_decay", exp.learner.adamw.weight_decay),

      KILO_KEY_NUM("loss.lambda", exp.loss.lambda_distill),
      KILO_KEY_NUM("loss.temperature", exp.loss.temperature),
      KILO_KEY_BOOL("loss.kl_reverse", exp.loss.kl_reverse),

      KILO_KEY_COUNT("train.batch_size", exp.train.batch_size),
      KILO_KEY_COUNT("train.epochs", exp.train.epochs),
      KILO_KEY_NUM("train.replay_fraction", exp.train.replay_fraction),
      KILO_KEY_COUNT("train.early_stop_patience", exp.train.early_stop_patience),
      KILO_KEY_COUNT("train.buffer_capacity", exp.train.buffer_capacity),
      KILO_KEY_NUM("train.split_train", exp.train.split_train),
      KILO_KEY_NUM("train.split_val", exp.train.split_val),
      KILO_KEY_NUM("train.split_test", exp.train.split_test),
      {"train.metric",
       {[](AppConfig& c, const std::string& k, const Json& v) {
          const auto m = as_string(k, v);
          if (m == "macro_f1") c.exp.train.metric = EvalMetric::macro_f1;
          else if (m == "accuracy") c.exp.train.metric = EvalMetric::accuracy;
          else throw bad_value(k, "expected macro_f1 or accuracy");
        },
        [](const AppConfig& c) {
          return nlohmann::ordered_json(c.exp.train.metric == EvalMetric::accuracy ? "accuracy" : "macro_f1");
        }}},
      KILO_KEY_BOOL("train.train_gat", exp.train.train_gat),
      KILO_KEY_COUNT("train.gat_epochs", exp.train.gat_epochs),
      KILO_KEY_NUM("train.gat_lr", exp.train.gat_lr),

      KILO_KEY_BOOL("flags.use_kg", exp.flags.use_kg),
      KILO_KEY_BOOL("flags.use_prompt", exp.flags.use_prompt),
      KILO_KEY_BOOL("flags.use_replay", exp.flags.use_replay),
      KILO_KEY_BOOL("flags.use_distill", exp.flags.use_distill),
  };
  return table;
}

#undef KILO_KEY_NUM
#undef KILO_KEY_COUNT
#undef KILO_KEY_BOOL
#undef KILO_KEY_STR

/// Nested objects flatten to dotted keys, so {"graph": {"k": 1}} == {"graph.k": 1}.
inline void flatten(const Json& j, const std::string& prefix, std::vector<std::pair<std::string, Json>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) flatten(*it, key, out);
    else out.emplace_back(key, *it);
  }
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, spec] : detail::key_table()) keys.push_back(k);
  return keys;
}

/// Sets one dotted key; unknown keys and ill-typed values are usage errors.
inline void apply_setting(AppConfig& cfg, const std::string& key, const nlohmann::json& value) {
  const auto& table = detail::key_table();
  auto it = table.find(key);
  if (it == table.end()) throw UsageError("unknown config key '" + key + "'");
  it->second.set(cfg, key, value);
}

/// Parses "key=value"; the value is read as JSON when it parses, else as a string.
inline std::pair<std::string, nlohmann::json> parse_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("expected key=value, got '" + text + "'");
  const std::string value = text.substr(eq + 1);
  auto j = nlohmann::json::parse(value, nullptr, false);
  if (j.is_discarded()) j = value;
  return {text.substr(0, eq), j};
}

inline void apply_json(AppConfig& cfg, const nlohmann::json& doc) {
  if (!doc.is_object()) throw UsageError("config file must hold a JSON object");
  std::vector<std::pair<std::string, nlohmann::json>> flat;
  detail::flatten(doc, "", flat);
  // "method" resets the flags, so it goes before any flags.* key.
  std::stable_partition(flat.begin(), flat.end(), [](const auto& kv) { return kv.first == "method"; });
  for (const auto& [k, v] : flat) apply_setting(cfg, k, v);
}

inline std::optional<std::uint64_t> parse_seed_text(const std::string& text, const std::string& what) {
  if (text.empty()) return std::nullopt;
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != text.size() || text[0] == '-') throw UsageError("invalid value for " + what + ": '" + text + "'");
  return static_cast<std::uint64_t>(v);
}

/// Defaults, then the file (if any), then `KILO_SEED` from `env`, then the
/// flag overrides in order. Validates the merged result.
inline AppConfig load_config(const std::optional<std::string>& path, const std::map<std::string, std::string>& env,
                             const std::vector<std::pair<std::string, nlohmann::json>>& overrides) {
  AppConfig cfg;
  if (path) {
    std::ifstream in(*path);
    if (!in) throw UsageError("cannot open config file: " + *path);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
      auto doc = nlohmann::json::parse(text, nullptr, false);
      if (doc.is_discarded()) throw UsageError("config file is not valid JSON: " + *path);
      apply_json(cfg, doc);
    }
  }
  if (auto it = env.find("KILO_SEED"); it != env.end()) {
    if (auto s = parse_seed_text(it->second, "KILO_SEED")) cfg.set_seed(*s);
  }
  for (const auto& [k, v] : overrides) apply_setting(cfg, k, v);
  cfg.validate();
  return cfg;
}

/// Every key with its effective value, in key order.
inline nlohmann::ordered_json config_to_json(const AppConfig& cfg) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, spec] : detail::key_table()) j[k] = spec.get(cfg);
  return j;
}

/// Hex FNV-style digest of the canonical settings dump.
inline std::string config_hash(const AppConfig& cfg) {
  auto j = config_to_json(cfg);
  j.erase("out");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_bytes(j.dump(), 0)));
  return buf;
}

}  // namespace kilo
