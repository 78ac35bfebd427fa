#pragma once

// `kilo` command line. run_command() is the whole program minus process
// plumbing, so tests drive it in-process.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kilo/config.hpp"
#include "kilo/continual.hpp"
#include "kilo/corpus.hpp"
#include "kilo/gat.hpp"
#include "kilo/kgraph.hpp"
#include "kilo/metrics.hpp"
#include "kilo/report.hpp"

namespace kilo {

enum ExitStatus : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

namespace cli_detail {

namespace fs = std::filesystem;

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
};

inline void add_common(CLI::App* app, CommonOptions& o, bool with_out = true) {
  app->add_option("--config", o.config_path, "JSON settings file (flat dotted keys)");
  app->add_option("--seed", o.seed, "Master seed (overrides KILO_SEED and the file)");
  if (with_out) app->add_option("--out", o.out, "Output directory");
  app->add_option("--set", o.sets, "Override a setting, key=value (repeatable)");
}

inline std::vector<std::pair<std::string, nlohmann::json>> overrides_from(const CommonOptions& o) {
  std::vector<std::pair<std::string, nlohmann::json>> ov;
  for (const auto& s : o.sets) ov.push_back(parse_assignment(s));
  if (o.seed) ov.emplace_back("seed", *o.seed);
  if (!o.out.empty()) ov.emplace_back("out", o.out);
  return ov;
}

inline AppConfig config_from(const CommonOptions& o, const std::map<std::string, std::string>& env,
                             std::vector<std::pair<std::string, nlohmann::json>> extra = {}) {
  auto ov = overrides_from(o);
  ov.insert(ov.end(), extra.begin(), extra.end());
  std::optional<std::string> path;
  if (!o.config_path.empty()) path = o.config_path;
  return load_config(path, env, ov);
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory " + dir.string() + ": " + ec.message());
}

inline std::vector<DomainCorpus> load_domains(const AppConfig& cfg, std::optional<DomainCorpus>& source) {
  std::vector<DomainCorpus> domains;
  if (cfg.corpus_path.empty()) {
    domains = generate_synthetic(cfg.synth).domains;
  } else {
    domains = group_by_domain(load_corpus(cfg.corpus_path));
  }
  if (!cfg.source_domain.empty()) {
    auto it = std::find_if(domains.begin(), domains.end(), [&](const auto& d) { return d.name == cfg.source_domain; });
    if (it == domains.end()) throw Error("source domain '" + cfg.source_domain + "' not found in corpus");
    source = *it;
    domains.erase(it);
  }
  if (domains.empty()) throw Error("no domains to train on");
  return domains;
}

inline std::string safe_name(const std::string& s) {
  std::string out;
  for (char c : s) out.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_');
  return out;
}

// --- subcommand bodies -----------------------------------------------------

inline int cmd_synth(const AppConfig& cfg, std::ostream& out) {
  const auto bench = generate_synthetic(cfg.synth);
  const fs::path dir = cfg.out_dir;
  ensure_dir(dir);
  std::vector<Document> docs;
  for (const auto& d : bench.domains) docs.insert(docs.end(), d.docs.begin(), d.docs.end());
  {
    std::ofstream f(dir / "corpus.jsonl", std::ios::binary);
    if (!f) throw Error("cannot write " + (dir / "corpus.jsonl").string());
    write_corpus(f, docs);
  }
  {
    std::ofstream f(dir / "facts.tsv", std::ios::binary);
    if (!f) throw Error("cannot write " + (dir / "facts.tsv").string());
    write_facts(f, bench.facts);
  }
  out << "wrote " << docs.size() << " documents in " << bench.domains.size() << " domains to "
      << (dir / "corpus.jsonl").string() << "\n";
  return kExitOk;
}

inline void print_stats(const KnowledgeGraph& g, std::ostream& out) {
  const auto s = graph_stats(g);
  out << "nodes\t" << s.nodes << "\n";
  out << "edges\t" << s.edges << "\n";
  out << "mean_degree\t" << format_fixed(s.mean_degree, 4) << "\n";
  out << "step\t" << s.step << "\n";
  for (const auto& [w, n] : s.weight_histogram) out << "weight_" << w << "\t" << n << "\n";
}

inline KnowledgeGraph graph_input(const AppConfig& cfg, const std::string& graph_path, const std::string& corpus_path) {
  if (!graph_path.empty()) return load_graph(graph_path);
  if (!corpus_path.empty()) return build_graph(load_corpus(corpus_path), cfg.exp.graph);
  throw UsageError("one of --graph or --corpus is required");
}

inline int cmd_run(AppConfig cfg, std::ostream& out) {
  if (!cfg.lexicon_path.empty()) cfg.exp.retrieval.lexicon = load_lexicon(cfg.lexicon_path);
  std::optional<DomainCorpus> source;
  const auto domains = load_domains(cfg, source);
  const fs::path dir = cfg.out_dir;
  const fs::path ckpt = dir / "checkpoints";
  ensure_dir(ckpt);

  auto observer = [&](const RunState& st, std::size_t t) {
    const std::string name = safe_name(st.domains[t].name);
    save_learner(st.params, cfg.seed(), (ckpt / ("learner_" + std::to_string(t + 1) + "_" + name + ".bin")).string());
    if (st.config.flags.use_kg)
      save_graph(st.graph, (ckpt / ("graph_" + std::to_string(t + 1) + "_" + name + ".jsonl")).string());
    if (t + 1 == st.domains.size() && st.config.flags.use_kg) save_gat(st.gat, (ckpt / "gat_final.bin").string());
  };
  RunRecord rec = run_sequence(domains, cfg.exp, source, observer);
  rec.config_hash = config_hash(cfg);

  std::ostringstream matrix;
  write_matrix(matrix, rec.matrix);
  write_text_file(dir / "matrix.tsv", matrix.str());
  write_text_file(dir / "run_record.json", run_record_to_json(rec, cfg.method, cfg.exp.flags).dump(2) + "\n");
  write_text_file(dir / "config.json", config_to_json(cfg).dump(2) + "\n");

  const auto& R = rec.matrix;
  out << "method\t" << cfg.method << "\n";
  if (R.tasks() >= 2) {
    out << "bwt\t" << format_fixed(bwt(R).aggregate, 2) << "\n";
    out << "fwt\t" << format_fixed(fwt(R).aggregate, 2) << "\n";
  }
  out << "final_f1\t" << format_fixed(final_mean(R), 2) << "\n";
  out << "wrote " << (dir / "matrix.tsv").string() << "\n";
  return kExitOk;
}

inline int cmd_metrics(const std::string& matrix_path, double cost, double reference_cost, std::ostream& out) {
  const auto R = load_matrix(matrix_path);
  const auto m = compute_metrics(R, cost, reference_cost);
  auto f2 = [](double v) { return format_fixed(v, 2); };
  out << "domain\tlearned\tfwt\tbwt\n";
  for (std::size_t j = 1; j <= R.tasks(); ++j) {
    out << R.domains[j - 1] << "\t" << f2(R.at(j, j)) << "\t"
        << (j >= 2 ? f2(m.fwt.per_domain[j - 2]) : std::string("-")) << "\t"
        << (j < R.tasks() ? f2(m.bwt.per_domain[j - 1]) : std::string("-")) << "\n";
  }
  out << "fwt\t" << f2(m.fwt.aggregate) << "\n";
  out << "bwt\t" << f2(m.bwt.aggregate) << (m.forgetting ? "\tforgetting" : "") << "\n";
  out << "f1\t" << f2(m.f1) << "\n";
  out << "kr\t" << f2(m.kr) << "\n";
  out << "tt\t" << f2(m.tt) << "\n";
  out << "total\t" << f2(m.total) << "\n";
  return kExitOk;
}

inline int cmd_prompt_eval(const std::string& path, std::ostream& out) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  std::size_t lineno = 0, n = 0;
  double b = 0.0, r = 0.0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, '\t')) cells.push_back(cell);
    if (cells.size() < 2) throw Error("prompt-eval line " + std::to_string(lineno) + ": expected candidate<TAB>reference");
    const std::vector<std::string> refs(cells.begin() + 1, cells.end());
    b += bleu(cells[0], refs);
    r += rouge_l(cells[0], refs[0]);
    ++n;
  }
  if (n == 0) throw Error("prompt-eval: no candidate/reference pairs in " + path);
  out << "pairs\t" << n << "\n";
  out << "bleu\t" << format_fixed(b / static_cast<double>(n), 6) << "\n";
  out << "rouge_l\t" << format_fixed(r / static_cast<double>(n), 6) << "\n";
  return kExitOk;
}

inline int cmd_report(const std::vector<std::string>& runs, const std::string& out_dir, std::ostream& out) {
  std::vector<RunOutputs> outputs;
  for (const auto& r : runs) outputs.push_back(load_run_outputs(r));
  for (const auto& p : write_report(outputs, out_dir)) out << "wrote " << p.string() << "\n";
  return kExitOk;
}

}  // namespace cli_detail

inline std::map<std::string, std::string> process_environment() {
  std::map<std::string, std::string> env;
  if (const char* s = std::getenv("KILO_SEED")) env["KILO_SEED"] = s;
  return env;
}

/// Parses and executes one invocation. `args` excludes the program name.
inline int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
                       const std::map<std::string, std::string>& env) {
  using namespace cli_detail;
  CLI::App app{"Continual-learning lab: knowledge-graph memory, GAT encoding, instruction prompts, replay and distillation.",
               "kilo"};
  app.require_subcommand(1);

  CommonOptions synth_o;
  auto* synth = app.add_subcommand("synth", "Generate the seeded synthetic domain-shift benchmark");
  add_common(synth, synth_o);

  auto* graph = app.add_subcommand("graph", "Build, inspect or export a knowledge graph");
  graph->require_subcommand(1);
  CommonOptions gb_o, gs_o, ge_o;
  std::string gb_corpus, gs_graph, gs_corpus, ge_graph, ge_corpus;
  auto* gbuild = graph->add_subcommand("build", "Build a graph from a JSONL corpus");
  add_common(gbuild, gb_o);
  gbuild->add_option("--corpus", gb_corpus, "Input corpus (JSONL)")->required();
  auto* gstats = graph->add_subcommand("stats", "Print node/edge counts, mean degree and weight histogram");
  add_common(gstats, gs_o, false);
  gstats->add_option("--graph", gs_graph, "Saved graph (JSONL)");
  gstats->add_option("--corpus", gs_corpus, "Build from this corpus instead");
  auto* gexport = graph->add_subcommand("export", "Export a graph as Graphviz DOT");
  add_common(gexport, ge_o);
  gexport->add_option("--graph", ge_graph, "Saved graph (JSONL)");
  gexport->add_option("--corpus", ge_corpus, "Build from this corpus instead");

  CommonOptions run_o;
  std::string method, corpus, source_domain;
  std::optional<std::size_t> k, max_triples;
  bool no_distill = false, no_replay = false;
  auto* run = app.add_subcommand("run", "Train over the domain sequence and write the accuracy matrix");
  add_common(run, run_o);
  run->add_option("--method", method, "kilo | naive | no-kg | no-prompt")
      ->check(CLI::IsMember({"kilo", "naive", "no-kg", "no-prompt"}));
  run->add_option("--k", k, "Retrieval hop count");
  run->add_option("--max-triples", max_triples, "Triples per prompt");
  run->add_flag("--no-distill", no_distill, "Disable logit distillation");
  run->add_flag("--no-replay", no_replay, "Disable exemplar replay");
  run->add_option("--corpus", corpus, "JSONL corpus (default: synthetic benchmark)");
  run->add_option("--source-domain", source_domain, "Corpus domain trained before the sequence");

  std::string matrix_path;
  double cost = 1.0, reference_cost = 1.0;
  auto* metrics = app.add_subcommand("metrics", "Recompute transfer metrics from a saved matrix");
  metrics->add_option("--matrix", matrix_path, "matrix.tsv from a run")->required();
  metrics->add_option("--cost", cost, "Training cost of this run")->check(CLI::PositiveNumber);
  metrics->add_option("--reference-cost", reference_cost, "Reference cost for TT")->check(CLI::PositiveNumber);

  std::string pe_input;
  auto* peval = app.add_subcommand("prompt-eval", "BLEU / ROUGE-L of candidate prompts against references");
  peval->add_option("--input", pe_input, "TSV lines: candidate<TAB>reference[<TAB>reference...]")->required();

  std::vector<std::string> report_runs;
  std::string report_out = "report";
  auto* report = app.add_subcommand("report", "Render transfer, summary and ablation tables from run directories");
  report->add_option("--runs", report_runs, "Run directories")->required()->delimiter(',');
  report->add_option("--out", report_out, "Report directory");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return kExitOk;
    err << app.help();
    return kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(config_from(synth_o, env), out);
    if (*gbuild) {
      auto cfg = config_from(gb_o, env);
      if (gb_o.out.empty()) throw UsageError("graph build: --out FILE is required");
      UpdateStats stats;
      auto g = build_graph(load_corpus(gb_corpus), cfg.exp.graph, &stats);
      save_graph(g, gb_o.out);
      print_stats(g, out);
      return kExitOk;
    }
    if (*gstats) {
      auto cfg = config_from(gs_o, env);
      print_stats(graph_input(cfg, gs_graph, gs_corpus), out);
      return kExitOk;
    }
    if (*gexport) {
      auto cfg = config_from(ge_o, env, {});
      const auto dot = to_dot(graph_input(cfg, ge_graph, ge_corpus));
      if (ge_o.out.empty()) out << dot;
      else write_text_file(ge_o.out, dot);
      return kExitOk;
    }
    if (*run) {
      std::vector<std::pair<std::string, nlohmann::json>> extra;
      if (!method.empty()) extra.emplace_back("method", method);
      if (k) extra.emplace_back("retrieval.k", *k);
      if (max_triples) extra.emplace_back("retrieval.max_triples", *max_triples);
      if (no_distill) extra.emplace_back("flags.use_distill", false);
      if (no_replay) extra.emplace_back("flags.use_replay", false);
      if (!corpus.empty()) extra.emplace_back("corpus.path", corpus);
      if (!source_domain.empty()) extra.emplace_back("corpus.source_domain", source_domain);
      return cmd_run(config_from(run_o, env, extra), out);
    }
    if (*metrics) return cmd_metrics(matrix_path, cost, reference_cost, out);
    if (*peval) return cmd_prompt_eval(pe_input, out);
    if (*report) return cmd_report(report_runs, report_out, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  err << app.help();
  return kExitUsage;
}

inline int run_command(const std::vector<std::string>& args, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  return run_command(args, out, err, process_environment());
}

}  // namespace kilo
