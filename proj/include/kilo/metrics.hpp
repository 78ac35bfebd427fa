#pragma once

// Continual-learning metrics over an accuracy matrix, the summary total
// score, and automatic prompt-quality metrics (BLEU, ROUGE-L).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kilo/core.hpp"

namespace kilo {

/// R[0] is the pre-sequence baseline; R[t] (t >= 1) is measured right after
/// training domain t. Entries are percentages.
struct AccuracyMatrix {
  std::vector<std::string> domains;
  std::vector<std::vector<double>> rows;

  std::size_t tasks() const { return domains.size(); }
  bool has_baseline() const { return !rows.empty(); }
  bool complete() const { return rows.size() == domains.size() + 1; }

  /// 1-based (row, domain) access; row 0 is the baseline.
  double at(std::size_t row, std::size_t domain) const { return rows.at(row).at(domain - 1); }

  void validate() const {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != domains.size())
        throw Error("accuracy matrix row " + std::to_string(r) + " has wrong column count");
      for (double v : rows[r])
        if (!(v >= 0.0 && v <= 100.0)) throw Error("accuracy matrix entry outside [0,100]");
    }
  }

  friend bool operator==(const AccuracyMatrix&, const AccuracyMatrix&) = default;
};

struct TransferResult {
  std::vector<double> per_domain;
  double aggregate = 0.0;
};

inline double round2(double x) { return std::round(x * 100.0) / 100.0; }

/// Macro-averaged F1 in percent; a class with P + R = 0 contributes 0.
inline double macro_f1(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& golds,
                       std::size_t classes) {
  if (preds.size() != golds.size() || preds.empty()) throw Error("macro_f1: need equal, non-empty label lists");
  std::vector<double> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= classes || golds[i] >= classes) throw Error("macro_f1: label out of range");
    if (preds[i] == golds[i]) {
      tp[preds[i]] += 1;
    } else {
      fp[preds[i]] += 1;
      fn[golds[i]] += 1;
    }
  }
  double sum = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    const double p = tp[c] + fp[c] > 0 ? tp[c] / (tp[c] + fp[c]) : 0.0;
    const double r = tp[c] + fn[c] > 0 ? tp[c] / (tp[c] + fn[c]) : 0.0;
    if (p + r > 0) sum += 2 * p * r / (p + r);
  }
  return 100.0 * sum / static_cast<double>(classes);
}

inline double accuracy_percent(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& golds) {
  if (preds.size() != golds.size() || preds.empty()) throw Error("accuracy: need equal, non-empty label lists");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == golds[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(preds.size());
}

/// BWT_j = R[T][j] - R[j][j] for j < T; aggregate is their mean.
inline TransferResult bwt(const AccuracyMatrix& R) {
  const std::size_t T = R.tasks();
  if (T < 2) throw Error("bwt: needs at least 2 domains");
  if (!R.complete()) throw Error("bwt: accuracy matrix is incomplete");
  TransferResult out;
  for (std::size_t j = 1; j < T; ++j) out.per_domain.push_back(R.at(T, j) - R.at(j, j));
  double s = 0.0;
  for (double v : out.per_domain) s += v;
  out.aggregate = s / static_cast<double>(out.per_domain.size());
  return out;
}

/// FWT_j = R[j-1][j] - b[j] for j in [2, T]; aggregate is their mean.
inline TransferResult fwt(const AccuracyMatrix& R) {
  const std::size_t T = R.tasks();
  if (T < 2) throw Error("fwt: needs at least 2 domains");
  if (!R.has_baseline()) throw Error("fwt: missing baseline row");
  if (R.rows.size() < T) throw Error("fwt: accuracy matrix is incomplete");
  TransferResult out;
  for (std::size_t j = 2; j <= T; ++j) out.per_domain.push_back(R.at(j - 1, j) - R.at(0, j));
  double s = 0.0;
  for (double v : out.per_domain) s += v;
  out.aggregate = s / static_cast<double>(out.per_domain.size());
  return out;
}

/// KR = 100 * mean_{j<T} R[T][j] / R[j][j]; terms above 100 are kept.
inline double retention_rate(const AccuracyMatrix& R) {
  const std::size_t T = R.tasks();
  if (T < 2) throw Error("retention_rate: needs at least 2 domains");
  if (!R.complete()) throw Error("retention_rate: accuracy matrix is incomplete");
  double s = 0.0;
  for (std::size_t j = 1; j < T; ++j) {
    if (R.at(j, j) <= 0.0) throw Error("retention_rate: zero diagonal entry for domain " + R.domains[j - 1]);
    s += R.at(T, j) / R.at(j, j);
  }
  return 100.0 * s / static_cast<double>(T - 1);
}

/// min(100, 100 * t_ref / t_method) for a caller-chosen reference cost t_ref.
inline double efficiency_score(double t_method, double t_ref) {
  if (!(t_method > 0.0) || !(t_ref > 0.0)) throw Error("efficiency_score: times must be positive");
  return std::min(100.0, 100.0 * t_ref / t_method);
}

/// Arithmetic mean of (F1, KR, TT), rounded to 2 decimals.
inline double total_score(double f1, double kr, double tt) { return round2((f1 + kr + tt) / 3.0); }

inline double final_mean(const AccuracyMatrix& R) {
  if (!R.complete()) throw Error("final_mean: accuracy matrix is incomplete");
  const auto& last = R.rows.back();
  double s = 0.0;
  for (double v : last) s += v;
  return s / static_cast<double>(last.size());
}

struct MetricsReport {
  TransferResult fwt;
  TransferResult bwt;
  std::vector<double> raw_forward;  // R[j-1][j] for j >= 2
  double first_domain_score = 0.0;  // R[1][1]
  double f1 = 0.0;                  // mean of the final row
  double kr = 0.0;
  double tt = 0.0;
  double total = 0.0;
  double cost = 0.0;  // cumulative training cost behind tt
  bool forgetting = false;
};

inline MetricsReport compute_metrics(const AccuracyMatrix& R, double cost, double reference_cost) {
  R.validate();
  const std::size_t T = R.tasks();
  for (std::size_t r = 0; r <= T; ++r) {
    if (r >= R.rows.size())
      throw Error("accuracy matrix missing row for domain " + R.domains[r - 1]);
  }
  MetricsReport m;
  m.fwt = fwt(R);
  m.bwt = bwt(R);
  for (std::size_t j = 2; j <= T; ++j) m.raw_forward.push_back(R.at(j - 1, j));
  m.first_domain_score = R.at(1, 1);
  m.f1 = final_mean(R);
  m.kr = retention_rate(R);
  m.cost = cost;
  m.tt = efficiency_score(cost, reference_cost);
  m.total = total_score(m.f1, m.kr, m.tt);
  m.forgetting = m.bwt.aggregate < 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Matrix file: header "stage<TAB>domain...", then "baseline" and one row per
// trained domain, 6-decimal percentages.

inline std::string format_fixed(double v, int decimals) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(decimals);
  os << (v == 0.0 ? 0.0 : v);  // no "-0.00"
  std::string s = os.str();
  if (s.starts_with("-") && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

inline void write_matrix(std::ostream& out, const AccuracyMatrix& R) {
  out << "stage";
  for (const auto& d : R.domains) out << '\t' << d;
  out << '\n';
  for (std::size_t r = 0; r < R.rows.size(); ++r) {
    out << (r == 0 ? std::string("baseline") : R.domains.at(r - 1));
    for (double v : R.rows[r]) out << '\t' << format_fixed(v, 6);
    out << '\n';
  }
}

inline AccuracyMatrix read_matrix(std::istream& in) {
  AccuracyMatrix R;
  std::string line;
  std::size_t lineno = 0;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(s);
    while (std::getline(ss, cell, '\t')) cells.push_back(cell);
    return cells;
  };
  if (!std::getline(in, line)) throw Error("matrix file is empty");
  ++lineno;
  auto header = split(line);
  if (header.size() < 2 || header[0] != "stage") throw Error("matrix line 1: bad header");
  R.domains.assign(header.begin() + 1, header.end());
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != R.domains.size() + 1) throw Error("matrix line " + std::to_string(lineno) + ": wrong cell count");
    const std::size_t r = R.rows.size();
    const std::string expected = r == 0 ? "baseline" : (r <= R.domains.size() ? R.domains[r - 1] : "?");
    if (cells[0] != expected)
      throw Error("matrix line " + std::to_string(lineno) + ": expected row '" + expected + "'");
    std::vector<double> row;
    for (std::size_t c = 1; c < cells.size(); ++c) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cells[c], &used));
        if (used != cells[c].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw Error("matrix line " + std::to_string(lineno) + ": bad number '" + cells[c] + "'");
      }
    }
    R.rows.push_back(std::move(row));
  }
  if (R.rows.size() < R.domains.size() + 1) {
    const std::size_t missing = R.rows.size();
    throw Error(missing == 0 ? std::string("accuracy matrix missing baseline row")
                             : "accuracy matrix missing row for domain " + R.domains[missing - 1]);
  }
  R.validate();
  return R;
}

inline AccuracyMatrix load_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open matrix file: " + path);
  return read_matrix(in);
}

// ---------------------------------------------------------------------------
// Prompt-quality metrics

/// BLEU with uniform weights over n = 1..min(max_n, |candidate|), brevity
/// penalty against the closest reference length, no smoothing.
inline double bleu(const std::string& candidate, const std::vector<std::string>& references, std::size_t max_n = 4) {
  if (references.empty()) throw Error("bleu: needs at least one reference");
  const auto cand = token_strings(candidate);
  if (cand.empty()) return 0.0;
  std::vector<std::vector<std::string>> refs;
  for (const auto& r : references) refs.push_back(token_strings(r));

  auto ngram_counts = [](const std::vector<std::string>& toks, std::size_t n) {
    std::map<std::vector<std::string>, std::size_t> counts;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) ++counts[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
    return counts;
  };

  const std::size_t N = std::min(max_n, cand.size());
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= N; ++n) {
    const auto cc = ngram_counts(cand, n);
    std::map<std::vector<std::string>, std::size_t> max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    std::size_t clipped = 0, total = 0;
    for (const auto& [g, c] : cc) {
      total += c;
      auto it = max_ref.find(g);
      clipped += std::min(c, it == max_ref.end() ? 0 : it->second);
    }
    if (clipped == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
  }
  const double c = static_cast<double>(cand.size());
  double r = static_cast<double>(refs.front().size());
  for (const auto& ref : refs) {
    const double len = static_cast<double>(ref.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(N));
}

/// ROUGE-L F-measure over tokens.
inline double rouge_l(const std::string& candidate, const std::string& reference) {
  const auto a = token_strings(candidate);
  const auto b = token_strings(reference);
  if (a.empty() || b.empty()) return 0.0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[b.size()]);
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(a.size());
  const double r = lcs / static_cast<double>(b.size());
  return 2.0 * p * r / (p + r);
}

}  // namespace kilo
