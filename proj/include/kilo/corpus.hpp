#pragma once

// Document ingestion, validation, deterministic splitting and the seeded
// synthetic domain-shift benchmark.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kilo/core.hpp"

namespace kilo {

/// Half-open byte range [begin, end) into a document's text.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  friend auto operator<=>(const Span&, const Span&) = default;
};

struct GoldEntity {
  Span span;
  std::string type;
  std::string canonical;
  double confidence = 1.0;
  friend bool operator==(const GoldEntity&, const GoldEntity&) = default;
};

struct GoldRelation {
  std::string head;
  std::string rel;
  std::string tail;
  double confidence = 1.0;
  friend bool operator==(const GoldRelation&, const GoldRelation&) = default;
};

struct GoldAnnotations {
  std::vector<GoldEntity> entities;
  std::vector<GoldRelation> relations;
  std::vector<std::vector<Span>> coref_chains;
  friend bool operator==(const GoldAnnotations&, const GoldAnnotations&) = default;
};

struct Document {
  std::string id;
  std::string domain_id;
  std::string text;
  std::size_t label = 0;
  std::optional<GoldAnnotations> gold;
  friend bool operator==(const Document&, const Document&) = default;
};

/// Documents of one domain, in file order.
struct DomainCorpus {
  std::string name;
  std::vector<Document> docs;
  friend bool operator==(const DomainCorpus&, const DomainCorpus&) = default;
};

struct PlantedFact {
  std::string head;
  std::string rel;
  std::string tail;
  std::string domain;
  friend bool operator==(const PlantedFact&, const PlantedFact&) = default;
};

struct SyntheticConfig {
  std::size_t n_domains = 4;
  std::size_t classes = 4;
  std::size_t docs_per_domain = 400;
  std::size_t entities_per_domain = 24;
  double vocab_overlap = 0.3;
  // Probability that a label is the class named by the document's planted fact
  // (otherwise it is drawn uniformly).
  double coupling = 0.9;
  // Probability that a document carries its label's domain-specific style cue.
  double style_cue = 0.6;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_domains < 1) throw UsageError("synthetic: n_domains must be >= 1");
    if (classes < 2) throw UsageError("synthetic: classes must be >= 2");
    if (docs_per_domain < 1) throw UsageError("synthetic: docs_per_domain must be >= 1");
    if (entities_per_domain < 1) throw UsageError("synthetic: entities_per_domain must be >= 1");
    if (!(vocab_overlap >= 0.0 && vocab_overlap <= 1.0))
      throw UsageError("synthetic: vocab_overlap must be in [0,1]");
    if (!(coupling >= 0.0 && coupling <= 1.0)) throw UsageError("synthetic: coupling must be in [0,1]");
    if (!(style_cue >= 0.0 && style_cue <= 1.0)) throw UsageError("synthetic: style_cue must be in [0,1]");
  }
};

struct SyntheticBenchmark {
  std::vector<DomainCorpus> domains;
  std::vector<PlantedFact> facts;
  std::vector<std::string> concepts;  // tail concept per class
};

struct CorpusSplit {
  std::vector<Document> train;
  std::vector<Document> val;
  std::vector<Document> test;
};

// ---------------------------------------------------------------------------
// Validation

/// Every invariant violation of `doc`. `classes` == 0 skips the label bound.
inline std::vector<std::string> validate_document(const Document& doc, std::size_t classes) {
  std::vector<std::string> out;
  if (doc.id.empty()) out.emplace_back("id empty");
  if (doc.text.empty()) out.emplace_back("text empty");
  if (classes > 0 && doc.label >= classes) out.emplace_back("label out of range");
  if (!doc.gold) return out;

  const std::size_t n = doc.text.size();
  auto span_ok = [n](const Span& s) { return s.begin < s.end && s.end <= n; };
  std::set<std::string> canonicals;
  for (const auto& e : doc.gold->entities) {
    if (!span_ok(e.span)) out.emplace_back("span out of bounds");
    if (!(e.confidence >= 0.0 && e.confidence <= 1.0)) out.emplace_back("entity confidence out of range");
    if (e.canonical.empty()) out.emplace_back("entity canonical empty");
    canonicals.insert(e.canonical);
  }
  for (const auto& r : doc.gold->relations) {
    if (!(r.confidence >= 0.0 && r.confidence <= 1.0)) out.emplace_back("relation confidence out of range");
    if (!canonicals.contains(r.head)) out.push_back("relation endpoint not an entity: " + r.head);
    if (!canonicals.contains(r.tail)) out.push_back("relation endpoint not an entity: " + r.tail);
  }
  for (const auto& chain : doc.gold->coref_chains) {
    for (const auto& s : chain) {
      if (!span_ok(s)) out.emplace_back("coref span out of bounds");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline nlohmann::ordered_json span_to_json(const Span& s) { return nlohmann::ordered_json::array({s.begin, s.end}); }

inline Span span_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_unsigned() || !j[1].is_number_unsigned())
    throw Error("span must be [start, end]");
  return Span{j[0].get<std::size_t>(), j[1].get<std::size_t>()};
}

inline nlohmann::ordered_json gold_to_json(const GoldAnnotations& g) {
  nlohmann::ordered_json out;
  auto ents = nlohmann::ordered_json::array();
  for (const auto& e : g.entities) {
    ents.push_back({{"span", span_to_json(e.span)},
                    {"type", e.type},
                    {"canonical", e.canonical},
                    {"confidence", e.confidence}});
  }
  auto rels = nlohmann::ordered_json::array();
  for (const auto& r : g.relations) {
    rels.push_back({{"head", r.head}, {"rel", r.rel}, {"tail", r.tail}, {"confidence", r.confidence}});
  }
  auto chains = nlohmann::ordered_json::array();
  for (const auto& c : g.coref_chains) {
    auto chain = nlohmann::ordered_json::array();
    for (const auto& s : c) chain.push_back(span_to_json(s));
    chains.push_back(std::move(chain));
  }
  out["entities"] = std::move(ents);
  out["relations"] = std::move(rels);
  out["coref"] = std::move(chains);
  return out;
}

template <class T>
T required(const nlohmann::json& j, const char* key, const char* what) {
  if (!j.contains(key)) throw Error(std::string("missing ") + what + " " + key);
  return j.at(key).get<T>();
}

inline GoldAnnotations gold_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error("gold must be an object");
  GoldAnnotations g;
  if (j.contains("entities")) {
    for (const auto& e : j.at("entities")) {
      if (!e.contains("span")) throw Error("missing entity span");
      g.entities.push_back(GoldEntity{span_from_json(e.at("span")), required<std::string>(e, "type", "entity"),
                                      required<std::string>(e, "canonical", "entity"),
                                      required<double>(e, "confidence", "entity")});
    }
  }
  if (j.contains("relations")) {
    for (const auto& r : j.at("relations")) {
      g.relations.push_back(GoldRelation{required<std::string>(r, "head", "relation"),
                                         required<std::string>(r, "rel", "relation"),
                                         required<std::string>(r, "tail", "relation"),
                                         required<double>(r, "confidence", "relation")});
    }
  }
  if (j.contains("coref")) {
    for (const auto& c : j.at("coref")) {
      std::vector<Span> chain;
      for (const auto& s : c) chain.push_back(span_from_json(s));
      g.coref_chains.push_back(std::move(chain));
    }
  }
  return g;
}

}  // namespace detail

inline std::string document_to_json_line(const Document& doc) {
  nlohmann::ordered_json j;
  j["id"] = doc.id;
  j["domain"] = doc.domain_id;
  j["text"] = doc.text;
  j["label"] = doc.label;
  if (doc.gold) j["gold"] = detail::gold_to_json(*doc.gold);
  return j.dump();
}

/// Parses one record. Errors carry no line prefix; callers add it.
inline Document document_from_json_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error&) {
    throw Error("malformed record");
  }
  if (!j.is_object()) throw Error("record is not an object");
  Document doc;
  try {
    for (const char* key : {"id", "domain", "text", "label"}) {
      if (!j.contains(key)) throw Error(std::string("missing ") + key);
    }
    doc.id = j.at("id").get<std::string>();
    doc.domain_id = j.at("domain").get<std::string>();
    doc.text = j.at("text").get<std::string>();
    const auto& label = j.at("label");
    if (!label.is_number_integer() || label.get<long long>() < 0) throw Error("label must be a non-negative integer");
    doc.label = label.get<std::size_t>();
    if (j.contains("gold") && !j.at("gold").is_null()) doc.gold = detail::gold_from_json(j.at("gold"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("bad field type: ") + e.what());
  }
  return doc;
}

/// Reads line-delimited records. `classes` == 0 infers the class count as max label + 1.
inline std::vector<Document> parse_corpus(std::istream& in, std::size_t classes = 0) {
  std::vector<Document> docs;
  std::vector<std::size_t> lines;
  std::map<std::string, std::size_t> first_line;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Document doc;
    try {
      doc = document_from_json_line(line);
    } catch (const Error& e) {
      throw Error("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (auto [it, inserted] = first_line.emplace(doc.id, lineno); !inserted) {
      throw Error("duplicate id \"" + doc.id + "\" on lines " + std::to_string(it->second) + " and " +
                  std::to_string(lineno));
    }
    docs.push_back(std::move(doc));
    lines.push_back(lineno);
  }
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto violations = validate_document(docs[i], classes);
    if (!violations.empty()) throw Error("line " + std::to_string(lines[i]) + ": " + violations.front());
  }
  return docs;
}

inline std::vector<Document> load_corpus(const std::string& path, std::size_t classes = 0) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file: " + path);
  return parse_corpus(in, classes);
}

inline void write_corpus(std::ostream& out, const std::vector<Document>& docs) {
  for (const auto& d : docs) out << document_to_json_line(d) << '\n';
}

/// Groups documents by domain, domains in order of first appearance.
inline std::vector<DomainCorpus> group_by_domain(const std::vector<Document>& docs) {
  std::vector<DomainCorpus> out;
  std::map<std::string, std::size_t> index;
  for (const auto& d : docs) {
    auto [it, inserted] = index.emplace(d.domain_id, out.size());
    if (inserted) out.push_back(DomainCorpus{d.domain_id, {}});
    out[it->second].docs.push_back(d);
  }
  return out;
}

inline std::size_t infer_class_count(const std::vector<DomainCorpus>& domains) {
  std::size_t classes = 0;
  for (const auto& d : domains)
    for (const auto& doc : d.docs) classes = std::max(classes, doc.label + 1);
  return std::max<std::size_t>(classes, 2);
}

inline void write_facts(std::ostream& out, const std::vector<PlantedFact>& facts) {
  for (const auto& f : facts) out << f.head << '\t' << f.rel << '\t' << f.tail << '\t' << f.domain << '\n';
}

// ---------------------------------------------------------------------------
// Splitting

/// Seeded shuffle then partition; each part keeps the original relative order.
inline CorpusSplit split_corpus(const std::vector<Document>& docs, double train, double val, double test,
                                std::uint64_t seed) {
  if (!(train > 0 && val > 0 && test > 0)) throw Error("split ratios must be positive");
  if (std::abs(train + val + test - 1.0) > 1e-9) throw Error("split ratios must sum to 1");
  const std::size_t n = docs.size();
  if (n < 3) throw Error("corpus too small to split: need at least 3 documents");

  auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(n * val)));
  auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(n * test)));
  while (n_val + n_test > n - 1) {
    if (n_val >= n_test && n_val > 1) --n_val;
    else --n_test;
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<std::size_t> part(n, 0);
  for (std::size_t k = 0; k < n_val; ++k) part[order[k]] = 1;
  for (std::size_t k = n_val; k < n_val + n_test; ++k) part[order[k]] = 2;

  CorpusSplit out;
  for (std::size_t i = 0; i < n; ++i) {
    (part[i] == 0 ? out.train : part[i] == 1 ? out.val : out.test).push_back(docs[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

namespace detail {

class NameForge {
 public:
  explicit NameForge(std::uint64_t seed) : rng_(seed) {}

  std::string word(std::size_t syllables) {
    static constexpr std::string_view kOnset = "bdfgklmnprstvz";
    static constexpr std::string_view kVowel = "aeiou";
    static constexpr std::string_view kCoda = "nrsxlk";
    while (true) {
      std::string w;
      for (std::size_t s = 0; s < syllables; ++s) {
        w.push_back(kOnset[rng_.below(kOnset.size())]);
        w.push_back(kVowel[rng_.below(kVowel.size())]);
      }
      w.push_back(kCoda[rng_.below(kCoda.size())]);
      if (used_.insert(w).second) return w;
    }
  }

  std::string capitalized(std::size_t syllables) {
    std::string w = word(syllables);
    w[0] = static_cast<char>(w[0] - 'a' + 'A');
    return w;
  }

  std::string entity_name() { return capitalized(2) + " " + capitalized(2); }

 private:
  Rng rng_;
  std::set<std::string> used_;
};

inline const std::vector<std::string>& fact_relations() {
  static const std::vector<std::string> rels = {"associated with", "indicates", "causes", "part of", "treats",
                                                "located in"};
  return rels;
}

}  // namespace detail

/// Seeded benchmark of `n_domains` corpora with planted (entity, rel, concept)
/// facts. Each domain has a mostly private entity vocabulary, its own filler
/// words, and a domain-specific mapping from labels to shared style-cue words.
inline SyntheticBenchmark generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  detail::NameForge forge(derive_seed(cfg.seed, "names"));
  Rng rng(derive_seed(cfg.seed, "synthetic"));
  const std::size_t C = cfg.classes;
  const std::size_t E = cfg.entities_per_domain;

  SyntheticBenchmark out;
  for (std::size_t k = 0; k < C; ++k) out.concepts.push_back(forge.entity_name());

  struct Entity {
    std::string name;
    std::size_t cls;
  };
  std::vector<Entity> shared_pool;
  for (std::size_t i = 0; i < E; ++i) shared_pool.push_back({forge.entity_name(), i % C});

  const std::size_t n_filler = 40;
  std::vector<std::string> shared_filler;
  for (std::size_t i = 0; i < n_filler; ++i) shared_filler.push_back(forge.word(2));
  std::vector<std::string> cue_pool;
  for (std::size_t i = 0; i < C; ++i) cue_pool.push_back(forge.word(3));

  const auto n_shared = static_cast<std::size_t>(std::llround(cfg.vocab_overlap * static_cast<double>(E)));
  const auto n_shared_filler =
      static_cast<std::size_t>(std::llround(cfg.vocab_overlap * static_cast<double>(n_filler)));
  const auto& rels = detail::fact_relations();

  for (std::size_t t = 0; t < cfg.n_domains; ++t) {
    DomainCorpus corpus;
    corpus.name = "domain" + std::to_string(t + 1);
    const std::string& rel = rels[t % rels.size()];

    // Entity vocabulary: a seeded subset of the shared pool plus private names.
    std::vector<std::size_t> pool_idx(shared_pool.size());
    for (std::size_t i = 0; i < pool_idx.size(); ++i) pool_idx[i] = i;
    rng.shuffle(pool_idx);
    std::vector<Entity> entities;
    for (std::size_t i = 0; i < n_shared; ++i) entities.push_back(shared_pool[pool_idx[i]]);
    for (std::size_t i = n_shared; i < E; ++i) entities.push_back({forge.entity_name(), i % C});

    std::vector<std::string> filler;
    std::vector<std::size_t> filler_idx(shared_filler.size());
    for (std::size_t i = 0; i < filler_idx.size(); ++i) filler_idx[i] = i;
    rng.shuffle(filler_idx);
    for (std::size_t i = 0; i < n_shared_filler; ++i) filler.push_back(shared_filler[filler_idx[i]]);
    while (filler.size() < n_filler) filler.push_back(forge.word(2));

    std::vector<std::size_t> cue_of_class(C);
    for (std::size_t k = 0; k < C; ++k) cue_of_class[k] = k;
    rng.shuffle(cue_of_class);

    std::set<std::string> planted;
    for (const auto& e : entities) {
      if (planted.insert(e.name).second) out.facts.push_back({e.name, rel, out.concepts[e.cls], corpus.name});
    }

    for (std::size_t i = 0; i < cfg.docs_per_domain; ++i) {
      const Entity& ent = i < E ? entities[i] : entities[rng.below(E)];
      const bool defining = i < E || rng.bernoulli(0.15);
      const std::size_t label = rng.bernoulli(cfg.coupling) ? ent.cls : rng.below(C);
      const bool with_cue = rng.bernoulli(cfg.style_cue);
      const bool with_distractor = rng.bernoulli(0.3);
      const bool pronoun = defining && rng.bernoulli(0.5);

      Document doc;
      doc.id = corpus.name + "-" + std::to_string(i);
      doc.domain_id = corpus.name;
      doc.label = label;
      GoldAnnotations gold;
      std::string& text = doc.text;
      auto pick = [&] { return filler[rng.below(filler.size())]; };
      auto append = [&](const std::string& w) -> Span {
        if (!text.empty() && text.back() != ' ') text.push_back(' ');
        const std::size_t b = text.size();
        text += w;
        return Span{b, text.size()};
      };

      std::string fw = pick();
      fw[0] = static_cast<char>(fw[0] - 'a' + 'A');
      append(fw);
      append(pick());
      const Span ent_span = append(ent.name);
      append(pick());
      if (with_cue) append(cue_pool[cue_of_class[label]]);
      std::optional<Span> distractor;
      std::string distractor_name;
      if (with_distractor) {
        distractor_name = forge.capitalized(2);
        distractor = append(distractor_name);
      }
      append(pick());
      text.push_back('.');
      gold.entities.push_back({ent_span, "ENTITY", ent.name, 0.9 + 0.1 * rng.uniform()});
      if (distractor) {
        gold.entities.push_back({*distractor, "MISC", distractor_name, 0.5 + 0.3 * rng.uniform()});
        gold.relations.push_back({ent.name, "resembles", distractor_name, 0.8});
      }
      if (defining) {
        const std::string& concept_name = out.concepts[ent.cls];
        std::string head = ent.name;
        if (pronoun) {
          const Span it = append("It");
          gold.entities.push_back({it, "PRONOUN", "it", 0.9});
          gold.coref_chains.push_back({ent_span, it});
          head = "it";
        } else {
          gold.entities.push_back({append(ent.name), "ENTITY", ent.name, 0.95});
        }
        append(rel);
        gold.entities.push_back({append(concept_name), "CONCEPT", concept_name, 0.95});
        text.push_back('.');
        gold.relations.push_back({head, rel, concept_name, 0.75 + 0.2 * rng.uniform()});
      }
      doc.gold = std::move(gold);
      corpus.docs.push_back(std::move(doc));
    }
    out.domains.push_back(std::move(corpus));
  }
  return out;
}

}  // namespace kilo
