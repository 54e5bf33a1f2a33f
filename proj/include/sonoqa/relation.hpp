#pragma once

// Object relation module: each ROI's appearance feature is augmented with an
// attention-weighted sum over all ROIs, where the attention combines a
// geometry term (relative box layout) and an appearance term (key/query dot
// product), normalized over source ROIs.

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "sonoqa/autograd.hpp"
#include "sonoqa/params.hpp"

namespace sonoqa {

struct RelationConfig {
  std::size_t d_k = 16;
  std::size_t d_g = 32;
  std::size_t d_f = 64;
  double epsilon_norm = 1e-6;
  double log_epsilon = 1e-3;  // keeps log|dx| finite for coincident centers

  void validate() const {
    if (d_k == 0 || d_g == 0 || d_f == 0) throw ConfigError("relation dimensions must be positive");
    if (d_g % 8 != 0) throw ConfigError("relation d_g must be divisible by 8");
    if (!(epsilon_norm > 0.0)) throw ConfigError("relation epsilon_norm must be positive");
  }
};

// Box as center and extent, in pixels.
struct BoxGeometry {
  double cx = 0, cy = 0, w = 1, h = 1;
};

// (log(|dx|/w_m + eps), log(|dy|/h_m + eps), log(w_n/w_m), log(h_n/h_m))
inline std::array<double, 4> geometry_raw(const BoxGeometry& m, const BoxGeometry& n, double log_eps = 1e-3) {
  if (!(m.w > 0 && m.h > 0 && n.w > 0 && n.h > 0)) throw InputError("relation boxes need positive extents");
  return {std::log(std::abs(m.cx - n.cx) / m.w + log_eps), std::log(std::abs(m.cy - n.cy) / m.h + log_eps),
          std::log(n.w / m.w), std::log(n.h / m.h)};
}

// Lifts the 4-term relative geometry to d_g dimensions: for every term, sin/cos
// pairs at d_g/8 wavelengths spaced geometrically up to 1000.
inline std::vector<double> geometric_embed(const BoxGeometry& m, const BoxGeometry& n, std::size_t d_g,
                                           double log_eps = 1e-3) {
  if (d_g == 0 || d_g % 8 != 0) throw ConfigError("geometric embedding dimension must be divisible by 8");
  const auto raw = geometry_raw(m, n, log_eps);
  const std::size_t freqs = d_g / 8;
  std::vector<double> out(d_g);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < freqs; ++j) {
      const double wave = std::pow(1000.0, static_cast<double>(j) / static_cast<double>(freqs));
      const double arg = 100.0 * raw[i] / wave;
      out[i * 2 * freqs + 2 * j] = std::sin(arg);
      out[i * 2 * freqs + 2 * j + 1] = std::cos(arg);
    }
  return out;
}

// [N*N, d_g], row m*N + n holds the embedding of pair (m, n).
template <typename T>
Tensor<T> pairwise_embedding(const std::vector<BoxGeometry>& boxes, const RelationConfig& cfg) {
  const std::size_t n = boxes.size();
  Tensor<T> e({n * n, cfg.d_g});
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      const auto v = geometric_embed(boxes[a], boxes[b], cfg.d_g, cfg.log_epsilon);
      for (std::size_t k = 0; k < cfg.d_g; ++k) e[(a * n + b) * cfg.d_g + k] = static_cast<T>(v[k]);
    }
  return e;
}

template <typename T>
void add_relation_params(ParameterSet<T>& p, const RelationConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  p.add_glorot("rel.wg", {cfg.d_g, 1}, cfg.d_g, 1, seed);
  p.add_glorot("rel.wk", {cfg.d_f, cfg.d_k}, cfg.d_f, cfg.d_k, seed);
  p.add_glorot("rel.wq", {cfg.d_f, cfg.d_k}, cfg.d_f, cfg.d_k, seed);
  p.add_glorot("rel.wv", {cfg.d_f, cfg.d_f}, cfg.d_f, cfg.d_f, seed);
}

namespace ag {

// Column-normalized w_G * exp(w_A):
//   W[m,n] = wg[m,n] e^{wa[m,n]} / sum_k wg[k,n] e^{wa[k,n]}
// A column whose denominator falls below eps is replaced by 1/N and passes no
// gradient.
template <typename T>
Var<T> relation_softmax(const Var<T>& wg, const Var<T>& wa, double eps) {
  detail::require_same_shape("relation_softmax", wg, wa);
  if (wg.value().rank() != 2 || wg.shape()[0] != wg.shape()[1])
    throw DimensionError("relation_softmax needs square [N,N] inputs");
  const std::size_t n = wg.shape()[0];
  const auto& g = wg.value();
  const auto& a = wa.value();
  Tensor<T> out({n, n});
  // e^{wa - colmax} / (scaled denominator), kept for the backward pass.
  std::vector<T> ratio(n * n, T(0));
  std::vector<char> degenerate(n, 0);
  const double log_eps = std::log(eps);
  for (std::size_t col = 0; col < n; ++col) {
    T mx = a[col];
    for (std::size_t m = 1; m < n; ++m) mx = std::max(mx, a[m * n + col]);
    double s = 0.0;
    for (std::size_t m = 0; m < n; ++m) s += static_cast<double>(g[m * n + col]) * std::exp(static_cast<double>(a[m * n + col] - mx));
    if (!(s > 0.0) || std::log(s) + static_cast<double>(mx) < log_eps) {
      degenerate[col] = 1;
      for (std::size_t m = 0; m < n; ++m) out[m * n + col] = T(1) / static_cast<T>(n);
      continue;
    }
    for (std::size_t m = 0; m < n; ++m) {
      const double e = std::exp(static_cast<double>(a[m * n + col] - mx)) / s;
      ratio[m * n + col] = static_cast<T>(e);
      out[m * n + col] = static_cast<T>(static_cast<double>(g[m * n + col]) * e);
    }
  }
  auto& tape = wg.tape();
  const std::size_t yid = tape.size();
  return tape.record("relation_softmax", std::move(out), {wg, wa},
                     [wg, wa, n, yid, ratio = std::move(ratio), degenerate = std::move(degenerate)](
                         Tape<T>& t, const std::vector<T>& gy) {
                       T* gg = t.accum(wg);
                       T* ga = t.accum(wa);
                       const auto& y = t.value(yid);
                       for (std::size_t col = 0; col < n; ++col) {
                         if (degenerate[col]) continue;
                         T dot = T(0);
                         for (std::size_t m = 0; m < n; ++m) dot += gy[m * n + col] * y[m * n + col];
                         for (std::size_t m = 0; m < n; ++m) {
                           const T centered = gy[m * n + col] - dot;
                           if (ga) ga[m * n + col] += y[m * n + col] * centered;
                           if (gg) gg[m * n + col] += ratio[m * n + col] * centered;
                         }
                       }
                     });
}

}  // namespace ag

// Intermediate values of one relation pass, for inspection and tests.
template <typename T>
struct RelationOutputs {
  Var<T> geometry_weight;    // [N,N]
  Var<T> appearance_weight;  // [N,N]
  Var<T> weights;            // [N,N], columns sum to 1
  Var<T> relation;           // [N,d_f]
  Var<T> fused;              // [N,d_f] = features + relation
};

// features [N,d_f]; embedding [N*N,d_g] from pairwise_embedding.
template <typename T>
RelationOutputs<T> relation_forward(const Var<T>& features, const Var<T>& embedding, const Var<T>& wg,
                                    const Var<T>& wk, const Var<T>& wq, const Var<T>& wv, const RelationConfig& cfg) {
  if (features.value().rank() != 2 || features.shape()[1] != cfg.d_f)
    throw DimensionError("relation features must be [N," + std::to_string(cfg.d_f) + "]");
  const std::size_t n = features.shape()[0];
  if (embedding.shape() != Shape{n * n, cfg.d_g}) throw DimensionError("relation embedding shape mismatch");
  RelationOutputs<T> o;
  o.geometry_weight = ag::reshape(ag::relu(ag::matmul(embedding, wg)), {n, n});
  const Var<T> keys = ag::matmul(features, wk);
  const Var<T> queries = ag::matmul(features, wq);
  o.appearance_weight =
      ag::scale(ag::matmul(keys, ag::transpose(queries)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_k))));
  o.weights = ag::relation_softmax(o.geometry_weight, o.appearance_weight, cfg.epsilon_norm);
  const Var<T> values = ag::matmul(features, wv);
  o.relation = ag::matmul(ag::transpose(o.weights), values);
  o.fused = ag::add(features, o.relation);
  return o;
}

template <typename T>
RelationOutputs<T> relation_forward(const Binding<T>& p, const Var<T>& features, const std::vector<BoxGeometry>& boxes,
                                    const RelationConfig& cfg) {
  const Var<T> emb = p.tape().constant(pairwise_embedding<T>(boxes, cfg));
  return relation_forward(features, emb, p("rel.wg"), p("rel.wk"), p("rel.wq"), p("rel.wv"), cfg);
}

// ------------------------------------------------------------ value level

struct RelationParams {
  Tensor<double> wg, wk, wq, wv;  // [d_g,1], [d_f,d_k], [d_f,d_k], [d_f,d_f]
};

struct RoiFeatureSet {
  std::vector<std::vector<double>> appearance;  // N x d_f
  std::vector<BoxGeometry> geometry;
};

inline double geometry_weight(const RelationParams& p, const std::vector<double>& embed) {
  if (embed.size() != p.wg.numel()) throw DimensionError("geometry_weight: embedding length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < embed.size(); ++i) s += p.wg[i] * embed[i];
  return std::max(0.0, s);
}

inline double appearance_weight(const std::vector<double>& fa_m, const std::vector<double>& fa_n,
                                const RelationParams& p, std::size_t d_k) {
  const std::size_t d_f = p.wk.dim(0);
  if (fa_m.size() != d_f || fa_n.size() != d_f) throw DimensionError("appearance_weight: feature length mismatch");
  double dot = 0.0;
  for (std::size_t j = 0; j < d_k; ++j) {
    double k = 0.0, q = 0.0;
    for (std::size_t i = 0; i < d_f; ++i) {
      k += fa_m[i] * p.wk.at(i, j);
      q += fa_n[i] * p.wq.at(i, j);
    }
    dot += k * q;
  }
  return dot / std::sqrt(static_cast<double>(d_k));
}

namespace detail {
inline Tensor<double> feature_matrix(const RoiFeatureSet& set) {
  if (set.appearance.empty() || set.appearance.size() != set.geometry.size())
    throw InputError("ROI set needs matching, non-empty appearance and geometry lists");
  const std::size_t n = set.appearance.size(), d = set.appearance[0].size();
  Tensor<double> f({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (set.appearance[i].size() != d) throw DimensionError("ROI appearance vectors differ in length");
    std::copy(set.appearance[i].begin(), set.appearance[i].end(), f.data() + i * d);
  }
  return f;
}
}  // namespace detail

// [N,N] relation weights; column n holds the weights of every source m for target n.
inline Tensor<double> relation_weights(const RoiFeatureSet& set, const RelationParams& p, const RelationConfig& cfg) {
  Tape<double> t;
  const auto f = t.constant(detail::feature_matrix(set));
  return relation_forward(f, t.constant(pairwise_embedding<double>(set.geometry, cfg)), t.constant(p.wg),
                          t.constant(p.wk), t.constant(p.wq), t.constant(p.wv), cfg)
      .weights.value();
}

// Fused per-ROI features f_A(n) + sum_m W[m,n] (W_V f_A(m)).
inline std::vector<std::vector<double>> relation_features(const RoiFeatureSet& set, const Tensor<double>& weights,
                                                          const RelationParams& p) {
  const Tensor<double> f = detail::feature_matrix(set);
  const std::size_t n = f.dim(0), d = f.dim(1);
  if (weights.shape() != Shape{n, n}) throw DimensionError("relation_features: weight matrix must be [N,N]");
  for (std::size_t col = 0; col < n; ++col) {
    double s = 0.0;
    for (std::size_t m = 0; m < n; ++m) s += weights.at(m, col);
    if (std::abs(s - 1.0) > 1e-9) throw InputError("relation_features: weight columns must sum to 1");
  }
  std::vector<std::vector<double>> out(n, std::vector<double>(d, 0.0));
  for (std::size_t target = 0; target < n; ++target) {
    for (std::size_t src = 0; src < n; ++src) {
      const double w = weights.at(src, target);
      for (std::size_t j = 0; j < d; ++j) {
        double v = 0.0;
        for (std::size_t i = 0; i < d; ++i) v += f.at(src, i) * p.wv.at(i, j);
        out[target][j] += w * v;
      }
    }
    for (std::size_t j = 0; j < d; ++j) out[target][j] += f.at(target, j);
  }
  return out;
}

}  // namespace sonoqa
