#pragma once

// Two-layer multi-head graph attention encoder with exact gradients.
//
// Per head: z_i = W h_i, e_ij = LeakyReLU(a_src . z_i + a_dst . z_j) over
// j in N(i) (plus i with self loops), alpha = softmax_j(e), out_i = sum_j
// alpha_ij z_j. Layer 1 concatenates heads and applies ELU; layer 2 averages
// heads with no activation.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "kilo/core.hpp"
#include "kilo/kgraph.hpp"
#include "kilo/learner.hpp"

namespace kilo {

struct GatConfig {
  std::size_t heads = 8;
  std::size_t in_dim = 256;
  std::size_t hidden_dim = 16;
  std::size_t out_dim = 16;
  double leaky_slope = 0.2;
  bool add_self_loops = true;
  std::uint64_t seed = 0;

  static constexpr std::size_t layers = 2;

  void validate() const {
    if (heads < 1) throw UsageError("gat.heads must be >= 1");
    if (in_dim < 1 || hidden_dim < 1 || out_dim < 1) throw UsageError("gat dimensions must be >= 1");
  }

  std::size_t layer_in(std::size_t layer) const { return layer == 0 ? in_dim : heads * hidden_dim; }
  std::size_t layer_out(std::size_t layer) const { return layer == 0 ? hidden_dim : out_dim; }

  friend bool operator==(const GatConfig&, const GatConfig&) = default;
};

struct GatHead {
  Matrix weight;             // dim_out x dim_in
  std::vector<double> attn;  // [a_src (dim_out), a_dst (dim_out)]
  friend bool operator==(const GatHead&, const GatHead&) = default;
};

/// Parameters (also used as the gradient container).
struct GatParams {
  GatConfig config;
  std::array<std::vector<GatHead>, 2> layers;

  /// Tensors in checkpoint order: layer, head, W then a.
  std::vector<std::span<double>> tensors() {
    std::vector<std::span<double>> t;
    for (auto& layer : layers)
      for (auto& h : layer) {
        t.push_back(h.weight.values());
        t.emplace_back(h.attn);
      }
    return t;
  }

  std::vector<std::span<const double>> tensors() const {
    auto t = const_cast<GatParams*>(this)->tensors();
    return {t.begin(), t.end()};
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = 0;
    for (auto t : tensors()) h = hash_combine(h, kilo::fingerprint(t));
    return h;
  }

  static GatParams zeros(const GatConfig& cfg) {
    GatParams p;
    p.config = cfg;
    for (std::size_t l = 0; l < 2; ++l) {
      for (std::size_t h = 0; h < cfg.heads; ++h)
        p.layers[l].push_back(GatHead{Matrix(cfg.layer_out(l), cfg.layer_in(l)),
                                      std::vector<double>(2 * cfg.layer_out(l), 0.0)});
    }
    return p;
  }

  friend bool operator==(const GatParams&, const GatParams&) = default;
};

/// Uniform in [-s, s], s = sqrt(6 / (fan_in + fan_out)); W uses
/// (dim_in, dim_out), the attention vector uses (2 dim_out, 1).
inline GatParams init_params(const GatConfig& cfg) {
  cfg.validate();
  GatParams p = GatParams::zeros(cfg);
  Rng rng(derive_seed(cfg.seed, "gat-init"));
  for (std::size_t l = 0; l < 2; ++l) {
    const double sw = std::sqrt(6.0 / static_cast<double>(cfg.layer_in(l) + cfg.layer_out(l)));
    const double sa = std::sqrt(6.0 / static_cast<double>(2 * cfg.layer_out(l) + 1));
    for (auto& h : p.layers[l]) {
      for (double& x : h.weight.values()) x = rng.uniform(-sw, sw);
      for (double& x : h.attn) x = rng.uniform(-sa, sa);
    }
  }
  return p;
}

using Adjacency = std::vector<std::vector<std::size_t>>;

struct GatHeadCache {
  Matrix z;                                // n x dim_out
  std::vector<std::vector<double>> score;  // pre-activation a . [z_i || z_j], per node per neighbor
  std::vector<std::vector<double>> alpha;  // attention per node per neighbor
};

struct GatLayerCache {
  Matrix input;  // n x dim_in
  std::vector<GatHeadCache> heads;
  Matrix pre_activation;  // layer 1: concatenated head outputs before ELU
};

struct ForwardCache {
  Adjacency neighborhoods;  // attention sets (self loop first when enabled)
  std::array<GatLayerCache, 2> layers;
  Matrix output;
  std::uint64_t params_fingerprint = 0;
};

namespace detail {

inline double leaky(double x, double slope) { return x > 0.0 ? x : slope * x; }
inline double leaky_grad(double x, double slope) { return x > 0.0 ? 1.0 : slope; }
inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
inline double elu_grad(double x) { return x > 0.0 ? 1.0 : std::exp(x); }

/// Attention over the neighborhood; returns n x dim_out head output.
inline Matrix head_forward(const GatHead& head, const Matrix& input, const Adjacency& nb, double slope,
                           GatHeadCache& cache) {
  const std::size_t n = input.rows();
  const std::size_t d = head.weight.rows();
  cache.z = Matrix(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < d; ++o) cache.z(i, o) = dot(head.weight.row(o), input.row(i));

  std::span<const double> a_src(head.attn.data(), d);
  std::span<const double> a_dst(head.attn.data() + d, d);
  std::vector<double> src(n), dst(n);
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = dot(a_src, cache.z.row(i));
    dst[i] = dot(a_dst, cache.z.row(i));
  }
  cache.score.assign(n, {});
  cache.alpha.assign(n, {});
  Matrix out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& js = nb[i];
    if (js.empty()) continue;
    auto& sc = cache.score[i];
    auto& al = cache.alpha[i];
    sc.resize(js.size());
    al.resize(js.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < js.size(); ++k) {
      sc[k] = src[i] + dst[js[k]];
      mx = std::max(mx, leaky(sc[k], slope));
    }
    double sum = 0.0;
    for (std::size_t k = 0; k < js.size(); ++k) sum += (al[k] = std::exp(leaky(sc[k], slope) - mx));
    for (std::size_t k = 0; k < js.size(); ++k) {
      al[k] /= sum;
      auto zj = cache.z.row(js[k]);
      for (std::size_t o = 0; o < d; ++o) out(i, o) += al[k] * zj[o];
    }
  }
  return out;
}

/// Accumulates parameter gradients into `grad` and returns d(loss)/d(input).
inline Matrix head_backward(const GatHead& head, const GatHeadCache& cache, const Matrix& input, const Adjacency& nb,
                            const Matrix& d_out, double slope, GatHead& grad) {
  const std::size_t n = input.rows();
  const std::size_t d = head.weight.rows();
  std::span<const double> a_src(head.attn.data(), d);
  std::span<const double> a_dst(head.attn.data() + d, d);

  Matrix dz(n, d);
  std::vector<double> dsrc(n, 0.0), ddst(n, 0.0);
  std::vector<double> dalpha;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& js = nb[i];
    if (js.empty()) continue;
    const auto& al = cache.alpha[i];
    const auto& sc = cache.score[i];
    auto g = d_out.row(i);
    dalpha.assign(js.size(), 0.0);
    double weighted = 0.0;
    for (std::size_t k = 0; k < js.size(); ++k) {
      auto zj = cache.z.row(js[k]);
      auto dzj = dz.row(js[k]);
      for (std::size_t o = 0; o < d; ++o) dzj[o] += al[k] * g[o];
      dalpha[k] = dot(g, zj);
      weighted += al[k] * dalpha[k];
    }
    for (std::size_t k = 0; k < js.size(); ++k) {
      const double de = al[k] * (dalpha[k] - weighted);
      const double ds = de * leaky_grad(sc[k], slope);
      dsrc[i] += ds;
      ddst[js[k]] += ds;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto zi = cache.z.row(i);
    auto dzi = dz.row(i);
    for (std::size_t o = 0; o < d; ++o) {
      grad.attn[o] += dsrc[i] * zi[o];
      grad.attn[d + o] += ddst[i] * zi[o];
      dzi[o] += dsrc[i] * a_src[o] + ddst[i] * a_dst[o];
    }
  }
  Matrix d_input(n, input.cols());
  for (std::size_t i = 0; i < n; ++i) {
    auto x = input.row(i);
    auto dx = d_input.row(i);
    for (std::size_t o = 0; o < d; ++o) {
      const double g = dz(i, o);
      if (g == 0.0) continue;
      auto w = head.weight.row(o);
      auto gw = grad.weight.row(o);
      for (std::size_t k = 0; k < x.size(); ++k) {
        gw[k] += g * x[k];
        dx[k] += g * w[k];
      }
    }
  }
  return d_input;
}

}  // namespace detail

/// Forward pass. `adjacency[i]` lists the neighbors node i attends to.
inline std::pair<Matrix, ForwardCache> gat_forward(const Adjacency& adjacency, const Matrix& features,
                                                   const GatParams& params) {
  const auto& cfg = params.config;
  const std::size_t n = features.rows();
  if (adjacency.size() != n) throw Error("gat_forward: adjacency size does not match feature rows");
  if (features.cols() != cfg.in_dim) throw Error("gat_forward: feature dimension mismatch");

  ForwardCache cache;
  cache.params_fingerprint = params.fingerprint();
  cache.neighborhoods.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::set<std::size_t> seen;
    auto& nb = cache.neighborhoods[i];
    if (cfg.add_self_loops) {
      nb.push_back(i);
      seen.insert(i);
    }
    for (std::size_t j : adjacency[i]) {
      if (j >= n) throw Error("gat_forward: adjacency index out of range");
      if (seen.insert(j).second) nb.push_back(j);
    }
  }

  // Layer 1: concat + ELU.
  auto& l1 = cache.layers[0];
  l1.input = features;
  l1.heads.resize(cfg.heads);
  l1.pre_activation = Matrix(n, cfg.heads * cfg.hidden_dim);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Matrix out = detail::head_forward(params.layers[0][h], features, cache.neighborhoods, cfg.leaky_slope, l1.heads[h]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < cfg.hidden_dim; ++o) l1.pre_activation(i, h * cfg.hidden_dim + o) = out(i, o);
  }
  Matrix hidden(n, cfg.heads * cfg.hidden_dim);
  for (std::size_t i = 0; i < hidden.size(); ++i) hidden.values()[i] = detail::elu(l1.pre_activation.values()[i]);

  // Layer 2: average.
  auto& l2 = cache.layers[1];
  l2.input = hidden;
  l2.heads.resize(cfg.heads);
  Matrix output(n, cfg.out_dim);
  const double inv_h = 1.0 / static_cast<double>(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Matrix out = detail::head_forward(params.layers[1][h], hidden, cache.neighborhoods, cfg.leaky_slope, l2.heads[h]);
    for (std::size_t i = 0; i < output.size(); ++i) output.values()[i] += inv_h * out.values()[i];
  }
  cache.output = output;
  return {std::move(output), std::move(cache)};
}

/// Gradients of sum(<upstream, output>) with respect to every W and a.
inline GatParams gat_backward(const GatParams& params, const ForwardCache& cache, const Matrix& upstream) {
  if (cache.params_fingerprint != params.fingerprint()) throw Error("gat_backward: stale cache");
  const auto& cfg = params.config;
  const std::size_t n = cache.output.rows();
  if (upstream.rows() != n || upstream.cols() != cfg.out_dim) throw Error("gat_backward: upstream shape mismatch");

  GatParams grads = GatParams::zeros(cfg);
  Matrix d_out(n, cfg.out_dim);
  const double inv_h = 1.0 / static_cast<double>(cfg.heads);
  for (std::size_t i = 0; i < d_out.size(); ++i) d_out.values()[i] = inv_h * upstream.values()[i];

  const auto& l2 = cache.layers[1];
  Matrix d_hidden(n, cfg.heads * cfg.hidden_dim);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Matrix dx = detail::head_backward(params.layers[1][h], l2.heads[h], l2.input, cache.neighborhoods, d_out,
                                      cfg.leaky_slope, grads.layers[1][h]);
    for (std::size_t i = 0; i < dx.size(); ++i) d_hidden.values()[i] += dx.values()[i];
  }

  const auto& l1 = cache.layers[0];
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Matrix d_head(n, cfg.hidden_dim);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < cfg.hidden_dim; ++o) {
        const std::size_t c = h * cfg.hidden_dim + o;
        d_head(i, o) = d_hidden(i, c) * detail::elu_grad(l1.pre_activation(i, c));
      }
    detail::head_backward(params.layers[0][h], l1.heads[h], l1.input, cache.neighborhoods, d_head, cfg.leaky_slope,
                          grads.layers[0][h]);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Graph encoding

/// Node order, undirected neighbor lists, and input features (raw node
/// embeddings padded or truncated to in_dim) for a knowledge graph.
struct GraphTensor {
  std::vector<NodeId> ids;
  Adjacency adjacency;
  Matrix features;
  std::vector<std::pair<std::size_t, std::size_t>> edges;  // directed, by row index
};

inline GraphTensor graph_tensor(const KnowledgeGraph& g, std::size_t in_dim) {
  GraphTensor t;
  std::map<NodeId, std::size_t> row;
  for (const auto& [id, n] : g.nodes()) {
    row[id] = t.ids.size();
    t.ids.push_back(id);
  }
  const std::size_t n = t.ids.size();
  t.adjacency.assign(n, {});
  t.features = Matrix(n, in_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& emb = g.nodes().at(t.ids[i]).embedding;
    for (std::size_t k = 0; k < std::min(in_dim, emb.size()); ++k) t.features(i, k) = emb[k];
  }
  std::vector<std::set<std::size_t>> nb(n);
  for (const auto& [k, e] : g.edges()) {
    const std::size_t h = row.at(e.head), tl = row.at(e.tail);
    if (h == tl) continue;
    nb[h].insert(tl);
    nb[tl].insert(h);
    t.edges.emplace_back(h, tl);
  }
  for (std::size_t i = 0; i < n; ++i) t.adjacency[i].assign(nb[i].begin(), nb[i].end());
  return t;
}

/// Runs the encoder over the graph and stores each node's output in
/// gat_embedding (raw embeddings are left untouched).
inline void encode_graph(KnowledgeGraph& g, const GatParams& params) {
  if (g.empty()) return;
  const auto t = graph_tensor(g, params.config.in_dim);
  const auto [out, cache] = gat_forward(t.adjacency, t.features, params);
  auto& nodes = g.mutable_nodes();
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    auto r = out.row(i);
    nodes.at(t.ids[i]).gat_embedding.assign(r.begin(), r.end());
  }
}

struct LinkTrainStats {
  std::size_t steps = 0;
  std::size_t pairs = 0;
  double mean_loss = 0.0;
};

/// One epoch of unsupervised link reconstruction: logistic loss on the dot
/// product of endpoint embeddings for each edge against one sampled
/// non-neighbor per edge, minibatched over edges.
inline LinkTrainStats train_link_reconstruction(const KnowledgeGraph& g, GatParams& params, AdamWState& opt,
                                                std::uint64_t seed, std::size_t batch_edges = 32) {
  LinkTrainStats stats;
  if (g.edges().empty()) return stats;
  const auto t = graph_tensor(g, params.config.in_dim);
  const std::size_t n = t.ids.size();
  if (n < 3) return stats;
  Rng rng(seed);
  std::vector<std::size_t> order(t.edges.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  double total = 0.0;

  for (std::size_t start = 0; start < order.size(); start += batch_edges) {
    const std::size_t stop = std::min(order.size(), start + batch_edges);
    auto [y, cache] = gat_forward(t.adjacency, t.features, params);
    Matrix dy(n, params.config.out_dim);
    const double inv = 1.0 / static_cast<double>(stop - start);
    auto pair_term = [&](std::size_t u, std::size_t v, double target) {
      const double s = dot(y.row(u), y.row(v));
      const double p = sigmoid(s);
      total += target > 0 ? -std::log(std::max(p, 1e-300)) : -std::log(std::max(1.0 - p, 1e-300));
      const double ds = (p - target) * inv;
      auto yu = y.row(u), yv = y.row(v);
      auto du = dy.row(u), dv = dy.row(v);
      for (std::size_t k = 0; k < yu.size(); ++k) {
        du[k] += ds * yv[k];
        dv[k] += ds * yu[k];
      }
      ++stats.pairs;
    };
    for (std::size_t k = start; k < stop; ++k) {
      const auto [u, v] = t.edges[order[k]];
      pair_term(u, v, 1.0);
      std::size_t w = rng.below(n);
      for (int tries = 0; tries < 8 && (w == u || w == v); ++tries) w = rng.below(n);
      if (w != u && w != v) pair_term(u, w, 0.0);
    }
    const auto grads = gat_backward(params, cache, dy);
    const auto pt = params.tensors();
    const auto gt = grads.tensors();
    adamw_step(std::span<const std::span<double>>(pt), std::span<const std::span<const double>>(gt), opt);
    ++stats.steps;
  }
  stats.mean_loss = stats.pairs ? total / static_cast<double>(stats.pairs) : 0.0;
  return stats;
}

// Checkpoint: "KILOGAT1", u64 heads, in_dim, hidden_dim, out_dim, f64
// leaky_slope, u8 add_self_loops, u64 seed, then little-endian doubles per
// tensor in tensors() order.
inline void save_gat(const GatParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write gat checkpoint: " + path);
  const auto& c = p.config;
  out.write("KILOGAT1", 8);
  detail::write_le<std::uint64_t>(out, c.heads);
  detail::write_le<std::uint64_t>(out, c.in_dim);
  detail::write_le<std::uint64_t>(out, c.hidden_dim);
  detail::write_le<std::uint64_t>(out, c.out_dim);
  detail::write_le<double>(out, c.leaky_slope);
  detail::write_le<std::uint8_t>(out, c.add_self_loops ? 1 : 0);
  detail::write_le<std::uint64_t>(out, c.seed);
  for (auto t : p.tensors())
    for (double v : t) detail::write_le(out, v);
  if (!out) throw Error("failed writing gat checkpoint: " + path);
}

inline GatParams load_gat(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open gat checkpoint: " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::string_view(magic, 8) != "KILOGAT1") throw Error("not a gat checkpoint: " + path);
  GatConfig c;
  c.heads = detail::read_le<std::uint64_t>(in);
  c.in_dim = detail::read_le<std::uint64_t>(in);
  c.hidden_dim = detail::read_le<std::uint64_t>(in);
  c.out_dim = detail::read_le<std::uint64_t>(in);
  c.leaky_slope = detail::read_le<double>(in);
  c.add_self_loops = detail::read_le<std::uint8_t>(in) != 0;
  c.seed = detail::read_le<std::uint64_t>(in);
  auto p = GatParams::zeros(c);
  for (auto t : p.tensors())
    for (double& v : t) v = detail::read_le<double>(in);
  return p;
}

}  // namespace kilo
