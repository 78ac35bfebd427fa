#pragma once

// Desk-scale adaptable model: hashed bag-of-words features, a linear (or
// one-hidden-layer tanh) classifier, cross-entropy + KL logit distillation,
// and decoupled-weight-decay Adam.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kilo/core.hpp"

namespace kilo {

/// Signed feature hashing over lowercase alphanumeric tokens.
struct FeatureEmbedder {
  std::size_t dim = 256;
  std::uint64_t seed = 0;

  void validate() const {
    if (dim < 2 || (dim & (dim - 1)) != 0) throw UsageError("embedder dim must be a power of two >= 2");
  }

  std::vector<double> embed(std::string_view text) const {
    std::vector<double> v(dim, 0.0);
    accumulate(text, 1.0, v);
    const double n = norm2(v);
    if (n > 0.0)
      for (double& x : v) x /= n;
    return v;
  }

  /// Adds weight * (unnormalized token counts) into `out`.
  void accumulate(std::string_view text, double weight, std::span<double> out) const {
    for (const auto& tok : tokenize(text)) {
      const std::uint64_t bucket = hash_bytes(tok.text, seed) & (dim - 1);
      const double sign = (hash_bytes(tok.text, seed ^ 0x5bd1e995ULL) & 1ULL) ? 1.0 : -1.0;
      out[bucket] += sign * weight;
    }
  }
};

inline std::vector<double> embed_text(std::string_view text, const FeatureEmbedder& emb) { return emb.embed(text); }

enum class LearnerMode { linear, mlp };

/// Classifier parameters. In mlp mode the input passes through a tanh layer of
/// width `hidden` before the output layer.
struct LearnerParams {
  LearnerMode mode = LearnerMode::linear;
  std::size_t classes = 2;
  std::size_t dim = 256;
  std::size_t hidden = 0;
  Matrix hidden_weight;  // hidden x dim (mlp only)
  std::vector<double> hidden_bias;
  Matrix weight;  // classes x (dim or hidden)
  std::vector<double> bias;

  static LearnerParams zeros(LearnerMode mode, std::size_t classes, std::size_t dim, std::size_t hidden = 0) {
    if (classes < 2) throw UsageError("learner needs at least 2 classes");
    if (mode == LearnerMode::mlp && hidden == 0) throw UsageError("mlp mode needs hidden > 0");
    LearnerParams p;
    p.mode = mode;
    p.classes = classes;
    p.dim = dim;
    p.hidden = mode == LearnerMode::mlp ? hidden : 0;
    if (mode == LearnerMode::mlp) {
      p.hidden_weight = Matrix(hidden, dim);
      p.hidden_bias.assign(hidden, 0.0);
    }
    p.weight = Matrix(classes, p.input_width());
    p.bias.assign(classes, 0.0);
    return p;
  }

  /// Glorot-uniform weights, zero biases.
  static LearnerParams random(LearnerMode mode, std::size_t classes, std::size_t dim, std::size_t hidden,
                              std::uint64_t seed) {
    LearnerParams p = zeros(mode, classes, dim, hidden);
    Rng rng(seed);
    auto fill = [&rng](Matrix& m) {
      const double s = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
      for (double& x : m.values()) x = rng.uniform(-s, s);
    };
    if (mode == LearnerMode::mlp) fill(p.hidden_weight);
    fill(p.weight);
    return p;
  }

  std::size_t input_width() const { return mode == LearnerMode::mlp ? hidden : dim; }

  /// Parameter tensors in a fixed order (hidden W, hidden b, W, b).
  std::vector<std::span<double>> tensors() {
    std::vector<std::span<double>> t;
    if (mode == LearnerMode::mlp) {
      t.push_back(hidden_weight.values());
      t.emplace_back(hidden_bias);
    }
    t.push_back(weight.values());
    t.emplace_back(bias);
    return t;
  }

  std::vector<std::span<const double>> tensors() const {
    auto t = const_cast<LearnerParams*>(this)->tensors();
    return {t.begin(), t.end()};
  }

  friend bool operator==(const LearnerParams&, const LearnerParams&) = default;
};

/// Frozen copy of the parameters from the previous domain.
class TeacherSnapshot {
 public:
  explicit TeacherSnapshot(LearnerParams params) : params_(std::make_shared<const LearnerParams>(std::move(params))) {}
  const LearnerParams& params() const { return *params_; }

 private:
  std::shared_ptr<const LearnerParams> params_;
};

struct LossConfig {
  double lambda_distill = 1.0;
  double temperature = 1.0;
  // false: KL(student || teacher), the argument order of the objective.
  bool kl_reverse = false;

  void validate() const {
    if (!(lambda_distill >= 0.0)) throw UsageError("loss.lambda_distill must be >= 0");
    if (!(temperature > 0.0)) throw UsageError("loss.temperature must be > 0");
  }
};

struct Example {
  std::vector<double> x;
  std::size_t label = 0;
};

namespace detail {

struct LearnerActivations {
  std::vector<double> hidden;  // tanh outputs (mlp)
  std::vector<double> logits;
};

inline LearnerActivations learner_forward(const LearnerParams& p, std::span<const double> x) {
  if (x.size() != p.dim) throw Error("forward_logits: dimension mismatch");
  LearnerActivations a;
  std::span<const double> in = x;
  if (p.mode == LearnerMode::mlp) {
    a.hidden.resize(p.hidden);
    for (std::size_t h = 0; h < p.hidden; ++h) a.hidden[h] = std::tanh(dot(p.hidden_weight.row(h), x) + p.hidden_bias[h]);
    in = a.hidden;
  }
  a.logits.resize(p.classes);
  for (std::size_t c = 0; c < p.classes; ++c) a.logits[c] = dot(p.weight.row(c), in) + p.bias[c];
  return a;
}

inline std::vector<double> log_softmax(std::span<const double> z, double temperature) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z) mx = std::max(mx, v / temperature);
  double s = 0.0;
  for (double v : z) s += std::exp(v / temperature - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] / temperature - lse;
  return out;
}

}  // namespace detail

inline std::vector<double> forward_logits(const LearnerParams& params, std::span<const double> x) {
  return detail::learner_forward(params, x).logits;
}

inline std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw Error("softmax: temperature must be positive");
  auto out = detail::log_softmax(logits, temperature);
  double s = 0.0;
  for (double& v : out) s += (v = std::exp(v));
  for (double& v : out) v /= s;
  return out;
}

inline double cross_entropy_loss(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) throw Error("cross_entropy_loss: label out of range");
  return std::max(0.0, -detail::log_softmax(logits, 1.0)[label]);
}

/// KL(p_student || p_teacher) at the configured temperature (reversed when
/// cfg.kl_reverse).
inline double kl_distill_loss(std::span<const double> student, std::span<const double> teacher,
                              const LossConfig& cfg = {}) {
  if (student.size() != teacher.size()) throw Error("kl_distill_loss: length mismatch");
  const auto ls = detail::log_softmax(student, cfg.temperature);
  const auto lt = detail::log_softmax(teacher, cfg.temperature);
  const auto& lp = cfg.kl_reverse ? lt : ls;
  const auto& lq = cfg.kl_reverse ? ls : lt;
  double kl = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
  return std::max(0.0, kl);
}

struct LossResult {
  double loss = 0.0;
  double task_loss = 0.0;
  double distill_loss = 0.0;
  LearnerParams grads;
};

/// Mean over the batch of cross-entropy + lambda * KL against the teacher, with
/// analytic gradients. Without a teacher the distillation term is exactly 0.
inline LossResult combined_loss_and_grads(const LearnerParams& params, const TeacherSnapshot* teacher,
                                          std::span<const Example> batch, const LossConfig& cfg) {
  if (batch.empty()) throw Error("combined_loss_and_grads: empty batch");
  LossResult r;
  r.grads = LearnerParams::zeros(params.mode, params.classes, params.dim, params.hidden);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const double T = cfg.temperature;
  const bool distill = teacher != nullptr && cfg.lambda_distill > 0.0;
  std::vector<double> dz(params.classes);

  for (const auto& ex : batch) {
    const auto act = detail::learner_forward(params, ex.x);
    if (ex.label >= params.classes) throw Error("combined_loss_and_grads: label out of range");
    const auto logp = detail::log_softmax(act.logits, 1.0);
    r.task_loss += -logp[ex.label] * inv_n;
    for (std::size_t c = 0; c < params.classes; ++c) dz[c] = std::exp(logp[c]) - (c == ex.label ? 1.0 : 0.0);

    if (distill) {
      const auto tz = forward_logits(teacher->params(), ex.x);
      const auto ls = detail::log_softmax(act.logits, T);
      const auto lt = detail::log_softmax(tz, T);
      double kl = 0.0;
      if (!cfg.kl_reverse) {
        for (std::size_t c = 0; c < ls.size(); ++c) kl += std::exp(ls[c]) * (ls[c] - lt[c]);
        for (std::size_t c = 0; c < ls.size(); ++c)
          dz[c] += cfg.lambda_distill * std::exp(ls[c]) * (ls[c] - lt[c] - kl) / T;
      } else {
        for (std::size_t c = 0; c < ls.size(); ++c) kl += std::exp(lt[c]) * (lt[c] - ls[c]);
        for (std::size_t c = 0; c < ls.size(); ++c) dz[c] += cfg.lambda_distill * (std::exp(ls[c]) - std::exp(lt[c])) / T;
      }
      r.distill_loss += kl * inv_n;
    }

    std::span<const double> in = params.mode == LearnerMode::mlp ? std::span<const double>(act.hidden) : ex.x;
    for (std::size_t c = 0; c < params.classes; ++c) {
      const double g = dz[c] * inv_n;
      r.grads.bias[c] += g;
      auto row = r.grads.weight.row(c);
      for (std::size_t k = 0; k < in.size(); ++k) row[k] += g * in[k];
    }
    if (params.mode == LearnerMode::mlp) {
      for (std::size_t h = 0; h < params.hidden; ++h) {
        double dh = 0.0;
        for (std::size_t c = 0; c < params.classes; ++c) dh += dz[c] * params.weight(c, h);
        const double dpre = dh * (1.0 - act.hidden[h] * act.hidden[h]) * inv_n;
        r.grads.hidden_bias[h] += dpre;
        auto row = r.grads.hidden_weight.row(h);
        for (std::size_t k = 0; k < ex.x.size(); ++k) row[k] += dpre * ex.x[k];
      }
    }
  }
  r.loss = r.task_loss + cfg.lambda_distill * r.distill_loss;
  return r;
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamWConfig {
  double lr = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  AdamWConfig config;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  AdamWState() = default;
  explicit AdamWState(AdamWConfig cfg) : config(cfg) {}
};

/// One decoupled-weight-decay Adam update over a list of parameter tensors.
/// Moments are allocated on first use. Throws on a non-finite gradient before
/// touching any parameter.
inline void adamw_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
                       AdamWState& state) {
  if (params.size() != grads.size()) throw Error("adamw_step: tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size()) throw Error("adamw_step: tensor shape mismatch");
    for (double g : grads[i])
      if (!std::isfinite(g)) throw Error("adamw_step: non-finite gradient");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw Error("adamw_step: state does not match parameters");

  const auto& c = state.config;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != params[i].size()) throw Error("adamw_step: state does not match parameters");
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      const double g = grads[i][k];
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      const double theta = params[i][k];
      params[i][k] = theta - c.lr * mhat / (std::sqrt(vhat) + c.eps) - c.lr * c.weight_decay * theta;
    }
  }
}

inline void adamw_step(LearnerParams& params, const LearnerParams& grads, AdamWState& state) {
  const auto p = params.tensors();
  const auto g = grads.tensors();
  adamw_step(std::span<const std::span<double>>(p), std::span<const std::span<const double>>(g), state);
}

inline std::size_t predict(const LearnerParams& params, std::span<const double> x) {
  const auto z = forward_logits(params, x);
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

// ---------------------------------------------------------------------------
// Checkpoints: "KILOLRN1", u32 mode, u64 classes, dim, hidden, then
// little-endian doubles for each tensor in tensors() order.

namespace detail {

template <class T>
void write_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T read_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw Error("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace detail

inline void save_learner(const LearnerParams& p, std::uint64_t seed, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write learner checkpoint: " + path);
  out.write("KILOLRN1", 8);
  detail::write_le<std::uint32_t>(out, p.mode == LearnerMode::mlp ? 1U : 0U);
  detail::write_le<std::uint64_t>(out, p.classes);
  detail::write_le<std::uint64_t>(out, p.dim);
  detail::write_le<std::uint64_t>(out, p.hidden);
  detail::write_le<std::uint64_t>(out, seed);
  for (const auto& t : p.tensors())
    for (double v : t) detail::write_le(out, v);
  if (!out) throw Error("failed writing learner checkpoint: " + path);
}

inline LearnerParams load_learner(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open learner checkpoint: " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::string_view(magic, 8) != "KILOLRN1") throw Error("not a learner checkpoint: " + path);
  const auto mode = detail::read_le<std::uint32_t>(in) == 1U ? LearnerMode::mlp : LearnerMode::linear;
  const auto classes = detail::read_le<std::uint64_t>(in);
  const auto dim = detail::read_le<std::uint64_t>(in);
  const auto hidden = detail::read_le<std::uint64_t>(in);
  (void)detail::read_le<std::uint64_t>(in);
  auto p = LearnerParams::zeros(mode, classes, dim, hidden);
  for (auto t : p.tensors())
    for (double& v : t) v = detail::read_le<double>(in);
  return p;
}

}  // namespace kilo
