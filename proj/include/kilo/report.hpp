#pragma once

// Run output directories and the report tables rendered from them.
//
// A run directory holds matrix.tsv, run_record.json and config.json. Report
// files carry deterministic quantities only (wall-clock time stays in the run
// record), so equal runs render byte-identical reports.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kilo/config.hpp"
#include "kilo/continual.hpp"
#include "kilo/metrics.hpp"

namespace kilo {

struct RunOutputs {
  std::string method;
  AccuracyMatrix matrix;
  double cost = 0.0;  // cumulative training cost units
};

inline std::string method_label(const std::string& method) {
  if (method == "kilo") return "KILO";
  if (method == "naive") return "continual fine-tuning";
  if (method == "no-kg") return "w/o KG";
  if (method == "no-prompt") return "w/o Prompt";
  return method;
}

inline nlohmann::ordered_json run_record_to_json(const RunRecord& rec, const std::string& method,
                                                 const AblationFlags& flags) {
  nlohmann::ordered_json j;
  j["method"] = method;
  j["seed"] = rec.seed;
  j["config_hash"] = rec.config_hash;
  j["flags"] = {{"use_kg", flags.use_kg},
                {"use_prompt", flags.use_prompt},
                {"use_replay", flags.use_replay},
                {"use_distill", flags.use_distill}};
  j["total_cost"] = rec.total_cost();
  j["total_wall_seconds"] = rec.total_wall_seconds();
  auto& doms = j["domains"] = nlohmann::ordered_json::array();
  for (const auto& d : rec.domains) {
    doms.push_back({{"name", d.name},
                    {"wall_seconds", d.wall_seconds},
                    {"epochs_run", d.epochs_run},
                    {"final_val_loss", d.final_val_loss},
                    {"cost_units", d.cost_units},
                    {"buffer_size", d.buffer_size},
                    {"graph_nodes", d.graph_nodes},
                    {"graph_edges", d.graph_edges},
                    {"prompted_train_inputs", d.prompted_train_inputs}});
  }
  return j;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

inline RunOutputs load_run_outputs(const std::filesystem::path& dir) {
  RunOutputs r;
  r.matrix = load_matrix((dir / "matrix.tsv").string());
  std::ifstream in(dir / "run_record.json");
  if (!in) throw Error("cannot open " + (dir / "run_record.json").string());
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw Error("run record is not valid JSON: " + (dir / "run_record.json").string());
  try {
    r.method = j.at("method").get<std::string>();
    r.cost = j.at("total_cost").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("run record " + (dir / "run_record.json").string() + ": " + e.what());
  }
  return r;
}

struct ReportFiles {
  std::string table1;  // per-domain transfer
  std::string table2;  // F1 / KR / TT / Total
  std::string table3;  // ablation view
  std::string record;  // full-precision JSON
};

/// TT uses the cheapest run as its reference, so the fastest method scores
/// 100 and a run twice as costly scores 50.
inline ReportFiles render_report(const std::vector<RunOutputs>& runs) {
  if (runs.empty()) throw Error("report: no runs");
  double ref = 0.0;
  for (const auto& r : runs) {
    if (!(r.cost > 0.0)) throw Error("report: run '" + r.method + "' has non-positive cost");
    ref = ref == 0.0 ? r.cost : std::min(ref, r.cost);
  }
  std::vector<MetricsReport> ms;
  for (const auto& r : runs) ms.push_back(compute_metrics(r.matrix, r.cost, ref));

  auto f2 = [](double v) { return format_fixed(v, 2); };
  ReportFiles out;

  std::string t1 = "method\tdomain\tlearned\tforward_raw\tfwt\tbwt\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& R = runs[i].matrix;
    const std::size_t T = R.tasks();
    for (std::size_t j = 1; j <= T; ++j) {
      t1 += runs[i].method + "\t" + R.domains[j - 1] + "\t" + f2(R.at(j, j)) + "\t";
      t1 += (j >= 2 ? f2(R.at(j - 1, j)) : std::string("-")) + "\t";
      t1 += (j >= 2 ? f2(ms[i].fwt.per_domain[j - 2]) : std::string("-")) + "\t";
      t1 += (j < T ? f2(ms[i].bwt.per_domain[j - 1]) : std::string("-")) + "\n";
    }
    t1 += runs[i].method + "\tmean\t-\t-\t" + f2(ms[i].fwt.aggregate) + "\t" + f2(ms[i].bwt.aggregate) + "\n";
  }
  out.table1 = std::move(t1);

  std::string t2 = "method\tF1\tKR\tTT\tTotal\tcost\tforgetting\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& m = ms[i];
    t2 += runs[i].method + "\t" + f2(m.f1) + "\t" + f2(m.kr) + "\t" + f2(m.tt) + "\t" + f2(m.total) + "\t" +
          format_fixed(m.cost, 0) + "\t" + (m.forgetting ? "yes" : "no") + "\n";
  }
  out.table2 = std::move(t2);

  // Full-method row first when present; deltas are against it.
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < runs.size(); ++i)
    if (runs[i].method == "kilo") order.push_back(i);
  for (std::size_t i = 0; i < runs.size(); ++i)
    if (runs[i].method != "kilo") order.push_back(i);
  const double base_f1 = ms[order.front()].f1;
  std::string t3 = "method\tvariant\tF1\tKR\tTT\tTotal\tdelta_F1\n";
  for (std::size_t i : order) {
    t3 += runs[i].method + "\t" + method_label(runs[i].method) + "\t" + f2(ms[i].f1) + "\t" + f2(ms[i].kr) + "\t" +
          f2(ms[i].tt) + "\t" + f2(ms[i].total) + "\t" + f2(ms[i].f1 - base_f1) + "\n";
  }
  out.table3 = std::move(t3);

  nlohmann::ordered_json rec;
  rec["reference_cost"] = ref;
  auto& arr = rec["runs"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& m = ms[i];
    arr.push_back({{"method", runs[i].method},
                   {"domains", runs[i].matrix.domains},
                   {"matrix", runs[i].matrix.rows},
                   {"fwt", m.fwt.per_domain},
                   {"fwt_mean", m.fwt.aggregate},
                   {"bwt", m.bwt.per_domain},
                   {"bwt_mean", m.bwt.aggregate},
                   {"forward_raw", m.raw_forward},
                   {"first_domain_score", m.first_domain_score},
                   {"f1", m.f1},
                   {"kr", m.kr},
                   {"tt", m.tt},
                   {"total", m.total},
                   {"cost", m.cost},
                   {"forgetting", m.forgetting}});
  }
  out.record = rec.dump(2) + "\n";
  return out;
}

/// Writes table1_transfer.tsv, table2_summary.tsv, table3_ablation.tsv and
/// report.json into `out_dir` (created if needed).
inline std::vector<std::filesystem::path> write_report(const std::vector<RunOutputs>& runs,
                                                       const std::filesystem::path& out_dir) {
  const auto files = render_report(runs);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create report directory " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written = {out_dir / "table1_transfer.tsv", out_dir / "table2_summary.tsv",
                                                out_dir / "table3_ablation.tsv", out_dir / "report.json"};
  write_text_file(written[0], files.table1);
  write_text_file(written[1], files.table2);
  write_text_file(written[2], files.table3);
  write_text_file(written[3], files.record);
  return written;
}

}  // namespace kilo
