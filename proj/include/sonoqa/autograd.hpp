#pragma once

// Reverse-mode differentiation over a linear tape.
//
// Every operation appends one node holding its output value and a closure
// that routes the node's gradient to its inputs. Nodes are appended in
// evaluation order, so walking the tape backwards is a valid topological
// order and each node is visited exactly once.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sonoqa/error.hpp"
#include "sonoqa/tensor.hpp"

namespace sonoqa {

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  // Receives the gradient of the node being processed.
  using BackwardFn = std::function<void(Tape&, const std::vector<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    check_finite("leaf", value);
    nodes_.push_back(Node{std::move(value), {}, requires_grad, "leaf", nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Appends an operation node. `fn` is dropped when no input needs a gradient.
  Var<T> record(const char* op, Tensor<T> out, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) {
      if (v.valid() && &v.tape() != this) throw ContractError(std::string(op) + ": operands from another tape");
      needs = needs || nodes_[v.id()].requires_grad;
    }
    return record_impl(op, std::move(out), needs, std::move(fn));
  }

  Var<T> record(const char* op, Tensor<T> out, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) {
      if (&v.tape() != this) throw ContractError(std::string(op) + ": operands from another tape");
      needs = needs || nodes_[v.id()].requires_grad;
    }
    return record_impl(op, std::move(out), needs, std::move(fn));
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient accumulator for `v`, or nullptr when `v` takes no gradient.
  T* accum(const Var<T>& v) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.numel(), T(0));
    return n.grad.data();
  }

  // Populates the gradient of `loss` with respect to every node that requires one.
  // Previous gradients are discarded, so repeated calls yield identical results.
  void backward(const Var<T>& loss) {
    if (&loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
    if (loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    for (auto& n : nodes_) n.grad.clear();
    Node& root = nodes_[loss.id()];
    if (!root.requires_grad) return;
    root.grad.assign(1, T(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  // Gradient after backward(); zeros when the node received none.
  Tensor<T> grad(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id());
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return Tensor<T>(n.value.shape(), n.grad);
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "";
    BackwardFn backward;
  };

  static void check_finite(const char* op, const Tensor<T>& t) {
    if (!t.all_finite()) throw NumericalError(std::string("operation '") + op + "' produced a non-finite value");
  }

  Var<T> record_impl(const char* op, Tensor<T> out, bool needs, BackwardFn fn) {
    check_finite(op, out);
    nodes_.push_back(Node{std::move(out), {}, needs, op, needs ? std::move(fn) : BackwardFn{}});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

namespace ag {

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

// Elementwise op; `dydx` maps an input value to the local derivative.
template <typename T, typename F, typename D>
Var<T> unary(const char* op, const Var<T>& x, F f, D dydx) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  return x.tape().record(op, std::move(out), {x}, [x, dydx](Tape<T>& t, const std::vector<T>& g) {
    T* gx = t.accum(x);
    if (!gx) return;
    const auto& xv = x.value();
    for (std::size_t i = 0; i < xv.numel(); ++i) gx[i] += g[i] * dydx(xv[i]);
  });
}

// Splits a shape around `axis` into (outer, extent, inner).
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& extent,
                       std::size_t& inner) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  extent = s[axis];
}

}  // namespace detail

// ---------------------------------------------------------------- arithmetic

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape<T>& t, const std::vector<T>& g) {
    if (T* ga = t.accum(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = t.accum(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("sub", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return a.tape().record("sub", std::move(out), {a, b}, [a, b](Tape<T>& t, const std::vector<T>& g) {
    if (T* ga = t.accum(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = t.accum(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

// Elementwise product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape<T>& t, const std::vector<T>& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (T* ga = t.accum(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    if (T* gb = t.accum(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
  });
}

// scale * x + shift
template <typename T>
Var<T> affine(const Var<T>& x, T scale, T shift = T(0)) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = scale * v + shift;
  return x.tape().record("affine", std::move(out), {x}, [x, scale](Tape<T>& t, const std::vector<T>& g) {
    if (T* gx = t.accum(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return affine(x, s, T(0));
}

// X[n,k] + b[k] broadcast over rows.
template <typename T>
Var<T> add_row_bias(const Var<T>& x, const Var<T>& b) {
  if (x.value().rank() != 2 || b.numel() != x.shape()[1])
    throw DimensionError("add_row_bias: " + shape_str(x.shape()) + " with bias " + shape_str(b.shape()));
  const std::size_t n = x.shape()[0], k = x.shape()[1];
  Tensor<T> out = x.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] += bv[j];
  return x.tape().record("add_row_bias", std::move(out), {x, b}, [x, b, n, k](Tape<T>& t, const std::vector<T>& g) {
    if (T* gx = t.accum(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    if (T* gb = t.accum(b))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) gb[j] += g[i * k + j];
  });
}

// A[n,k] * B[k,m]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
    throw DimensionError("matmul: " + shape_str(as) + " x " + shape_str(bs));
  const std::size_t n = as[0], k = as[1], m = bs[1];
  Tensor<T> out({n, m});
  blas::gemm_nn(n, m, k, a.value().data(), b.value().data(), out.data());
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b, n, k, m](Tape<T>& t, const std::vector<T>& g) {
    if (T* ga = t.accum(a)) blas::gemm_nt(n, k, m, g.data(), b.value().data(), ga);
    if (T* gb = t.accum(b)) blas::gemm_tn(k, m, n, a.value().data(), g.data(), gb);
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  if (x.value().rank() != 2) throw DimensionError("transpose needs a matrix, got " + shape_str(x.shape()));
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  Tensor<T> out({c, r});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return x.tape().record("transpose", std::move(out), {x}, [x, r, c](Tape<T>& t, const std::vector<T>& g) {
    if (T* gx = t.accum(x))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Tensor<T> out = x.value().reshaped(std::move(s));
  return x.tape().record("reshape", std::move(out), {x}, [x](Tape<T>& t, const std::vector<T>& g) {
    if (T* gx = t.accum(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// --------------------------------------------------------------- elementwise

// max(x, 0); the derivative at exactly 0 is taken as 0.
template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return detail::unary(
      "exp", x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return detail::unary(
      "log", x, [](T v) { return std::log(v); }, [](T v) { return T(1) / v; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  auto sig = [](T v) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); };
  return detail::unary("sigmoid", x, sig, [sig](T v) {
    const T s = sig(v);
    return s * (T(1) - s);
  });
}

// log(sigmoid(x)), stable for large |x|.
template <typename T>
Var<T> log_sigmoid(const Var<T>& x) {
  return detail::unary(
      "log_sigmoid", x, [](T v) { return std::min(v, T(0)) - std::log1p(std::exp(-std::abs(v))); },
      [](T v) { return v >= T(0) ? std::exp(-v) / (T(1) + std::exp(-v)) : T(1) / (T(1) + std::exp(v)); });
}

// x^p for x >= 0.
template <typename T>
Var<T> pow(const Var<T>& x, T p) {
  return detail::unary(
      "pow", x, [p](T v) { return p == T(0) ? T(1) : std::pow(v, p); },
      [p](T v) {
        if (p == T(0)) return T(0);
        if (v == T(0)) return p == T(1) ? T(1) : T(0);
        return p * std::pow(v, p - T(1));
      });
}

// max(x, lo); gradient flows only where x > lo.
template <typename T>
Var<T> clamp_min(const Var<T>& x, T lo) {
  return detail::unary(
      "clamp_min", x, [lo](T v) { return v > lo ? v : lo; }, [lo](T v) { return v > lo ? T(1) : T(0); });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = T(0);
  for (T v : x.value().values()) s += v;
  return x.tape().record("sum", Tensor<T>::scalar(s), {x}, [x](Tape<T>& t, const std::vector<T>& g) {
    if (T* gx = t.accum(x))
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Softmax along `axis`. Defaults to the last axis.
template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  std::size_t outer, extent, inner;
  detail::split_axis(x.shape(), axis, outer, extent, inner);
  const auto& xv = x.value();
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      T mx = xv[base];
      for (std::size_t e = 1; e < extent; ++e) mx = std::max(mx, xv[base + e * inner]);
      T z = T(0);
      for (std::size_t e = 0; e < extent; ++e) z += (out[base + e * inner] = std::exp(xv[base + e * inner] - mx));
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] /= z;
    }
  auto& tape = x.tape();
  const std::size_t yid = tape.size();
  return tape.record("softmax", std::move(out), {x},
                  [x, yid, outer, extent, inner](Tape<T>& t, const std::vector<T>& g) {
                    T* gx = t.accum(x);
                    if (!gx) return;
                    const auto& yv = t.value(yid);
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t in = 0; in < inner; ++in) {
                        const std::size_t base = o * extent * inner + in;
                        T dot = T(0);
                        for (std::size_t e = 0; e < extent; ++e) dot += g[base + e * inner] * yv[base + e * inner];
                        for (std::size_t e = 0; e < extent; ++e)
                          gx[base + e * inner] += yv[base + e * inner] * (g[base + e * inner] - dot);
                      }
                  });
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
  return softmax(x, x.value().rank() - 1);
}

template <typename T>
Var<T> log_softmax(const Var<T>& x, std::size_t axis) {
  std::size_t outer, extent, inner;
  detail::split_axis(x.shape(), axis, outer, extent, inner);
  const auto& xv = x.value();
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      T mx = xv[base];
      for (std::size_t e = 1; e < extent; ++e) mx = std::max(mx, xv[base + e * inner]);
      T z = T(0);
      for (std::size_t e = 0; e < extent; ++e) z += std::exp(xv[base + e * inner] - mx);
      const T lz = mx + std::log(z);
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] = xv[base + e * inner] - lz;
    }
  auto& tape = x.tape();
  const std::size_t yid = tape.size();
  return tape.record("log_softmax", std::move(out), {x},
                     [x, yid, outer, extent, inner](Tape<T>& t, const std::vector<T>& g) {
                       T* gx = t.accum(x);
                       if (!gx) return;
                       const auto& yv = t.value(yid);
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t in = 0; in < inner; ++in) {
                           const std::size_t base = o * extent * inner + in;
                           T gs = T(0);
                           for (std::size_t e = 0; e < extent; ++e) gs += g[base + e * inner];
                           for (std::size_t e = 0; e < extent; ++e)
                             gx[base + e * inner] += g[base + e * inner] - std::exp(yv[base + e * inner]) * gs;
                         }
                     });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x) {
  return log_softmax(x, x.value().rank() - 1);
}

// --------------------------------------------------------------- structural

// Concatenation along `axis`; all other extents must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis = 0) {
  if (xs.empty()) throw DimensionError("concat of zero tensors");
  const Shape& s0 = xs[0].shape();
  Shape out_shape = s0;
  out_shape.at(axis) = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != s0.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i])
        throw DimensionError("concat: " + shape_str(s) + " vs " + shape_str(s0) + " off axis " + std::to_string(axis));
    out_shape[axis] += s[axis];
  }
  std::size_t outer, extent, inner;
  detail::split_axis(out_shape, axis, outer, extent, inner);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::size_t ext = x.shape()[axis];
    const auto& xv = x.value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(xv.data() + o * ext * inner, ext * inner, out.data() + (o * extent + off) * inner);
    off += ext;
  }
  return xs[0].tape().record("concat", std::move(out), xs,
                             [xs, offsets, outer, extent, inner, axis](Tape<T>& t, const std::vector<T>& g) {
                               for (std::size_t k = 0; k < xs.size(); ++k) {
                                 T* gx = t.accum(xs[k]);
                                 if (!gx) continue;
                                 const std::size_t ext = xs[k].shape()[axis];
                                 for (std::size_t o = 0; o < outer; ++o) {
                                   const T* src = g.data() + (o * extent + offsets[k]) * inner;
                                   T* dst = gx + o * ext * inner;
                                   for (std::size_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
                                 }
                               }
                             });
}

// Rows of X[n,k] selected by index (repeats allowed).
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> rows) {
  if (x.value().rank() != 2) throw DimensionError("gather_rows needs a matrix");
  if (rows.empty()) throw DimensionError("gather_rows with no rows");
  const std::size_t n = x.shape()[0], k = x.shape()[1];
  Tensor<T> out({rows.size(), k});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(x.value().data() + rows[i] * k, k, out.data() + i * k);
  }
  return x.tape().record("gather_rows", std::move(out), {x}, [x, rows, k](Tape<T>& t, const std::vector<T>& g) {
    if (T* gx = t.accum(x))
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < k; ++j) gx[rows[i] * k + j] += g[i * k + j];
  });
}

// out[i] = X[i, cols[i]]
template <typename T>
Var<T> pick(const Var<T>& x, std::vector<std::size_t> cols) {
  if (x.value().rank() != 2 || cols.size() != x.shape()[0])
    throw DimensionError("pick: " + shape_str(x.shape()) + " with " + std::to_string(cols.size()) + " labels");
  const std::size_t k = x.shape()[1];
  Tensor<T> out({cols.size()});
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= k) throw DimensionError("pick: column index out of range");
    out[i] = x.value()[i * k + cols[i]];
  }
  return x.tape().record("pick", std::move(out), {x}, [x, cols, k](Tape<T>& t, const std::vector<T>& g) {
    if (T* gx = t.accum(x))
      for (std::size_t i = 0; i < cols.size(); ++i) gx[i * k + cols[i]] += g[i];
  });
}

// v[k] -> [n,k]
template <typename T>
Var<T> repeat_rows(const Var<T>& v, std::size_t n) {
  const std::size_t k = v.numel();
  Tensor<T> out({n, k});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(v.value().data(), k, out.data() + i * k);
  return v.tape().record("repeat_rows", std::move(out), {v}, [v, n, k](Tape<T>& t, const std::vector<T>& g) {
    if (T* gv = t.accum(v))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) gv[j] += g[i * k + j];
  });
}

// [C,H,W] -> [H*W, C]
template <typename T>
Var<T> chw_to_hwc(const Var<T>& x) {
  if (x.value().rank() != 3) throw DimensionError("chw_to_hwc needs [C,H,W]");
  const std::size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  Tensor<T> out({hw, c});
  const auto& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[p * c + ch] = xv[ch * hw + p];
  return x.tape().record("chw_to_hwc", std::move(out), {x}, [x, c, hw](Tape<T>& t, const std::vector<T>& g) {
    if (T* gx = t.accum(x))
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) gx[ch * hw + p] += g[p * c + ch];
  });
}

// ------------------------------------------------------------- convolution

// 2-D cross-correlation with zero padding.
//   input [C_in,H,W], kernels [C_out,C_in,k,k], bias [C_out] -> [C_out,H',W']
//   H' = floor((H + 2*padding - k) / stride) + 1
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernels, const Var<T>& bias, std::size_t stride,
              std::size_t padding) {
  const Shape& is = input.shape();
  const Shape& ks = kernels.shape();
  if (is.size() != 3) throw DimensionError("conv2d input must be [C,H,W], got " + shape_str(is));
  if (ks.size() != 4 || ks[2] != ks[3]) throw DimensionError("conv2d kernels must be [Co,Ci,k,k], got " + shape_str(ks));
  if (ks[1] != is[0])
    throw DimensionError("conv2d: kernel C_in " + std::to_string(ks[1]) + " vs input C_in " + std::to_string(is[0]));
  if (bias.numel() != ks[0]) throw DimensionError("conv2d: bias length must equal C_out");
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t ci = is[0], h = is[1], w = is[2], co = ks[0], k = ks[2];
  if (k > h + 2 * padding || k > w + 2 * padding) throw DimensionError("conv2d: kernel larger than padded input");
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (w + 2 * padding - k) / stride + 1;
  const std::size_t rows = ci * k * k, cols = ho * wo;

  // im2col: col[(c,ky,kx), (oy,ox)]
  std::vector<T> col(rows * cols, T(0));
  const T* xv = input.value().data();
  for (std::size_t c = 0; c < ci; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = col.data() + ((c * k + ky) * k + kx) * cols;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            dst[oy * wo + ox] = xv[(c * h + iy) * w + ix];
          }
        }
      }

  Tensor<T> out({co, ho, wo});
  const auto& bv = bias.value();
  for (std::size_t m = 0; m < co; ++m) std::fill_n(out.data() + m * cols, cols, bv[m]);
  blas::gemm_nn(co, cols, rows, kernels.value().data(), col.data(), out.data());

  return input.tape().record(
      "conv2d", std::move(out), {input, kernels, bias},
      [input, kernels, bias, col = std::move(col), ci, h, w, co, k, ho, wo, stride, padding, rows, cols](
          Tape<T>& t, const std::vector<T>& g) {
        if (T* gb = t.accum(bias))
          for (std::size_t m = 0; m < co; ++m) {
            T s = T(0);
            for (std::size_t p = 0; p < cols; ++p) s += g[m * cols + p];
            gb[m] += s;
          }
        if (T* gk = t.accum(kernels)) blas::gemm_nt(co, rows, cols, g.data(), col.data(), gk);
        if (T* gx = t.accum(input)) {
          std::vector<T> gcol(rows * cols, T(0));
          blas::gemm_tn(rows, cols, co, kernels.value().data(), g.data(), gcol.data());
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const T* src = gcol.data() + ((c * k + ky) * k + kx) * cols;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const std::ptrdiff_t iy =
                      static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const std::ptrdiff_t ix =
                        static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                    gx[(c * h + iy) * w + ix] += src[oy * wo + ox];
                  }
                }
              }
        }
      });
}

// Nearest-neighbour resize of [C,H,W] to [C,out_h,out_w].
template <typename T>
Var<T> upsample_nearest(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.value().rank() != 3) throw DimensionError("upsample_nearest needs [C,H,W]");
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  std::vector<std::size_t> src(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t xx = 0; xx < out_w; ++xx) src[y * out_w + xx] = (y * h / out_h) * w + (xx * w / out_w);
  Tensor<T> out({c, out_h, out_w});
  const auto& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < src.size(); ++p) out[ch * src.size() + p] = xv[ch * h * w + src[p]];
  return x.tape().record("upsample_nearest", std::move(out), {x}, [x, src, c, h, w](Tape<T>& t, const std::vector<T>& g) {
    if (T* gx = t.accum(x))
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < src.size(); ++p) gx[ch * h * w + src[p]] += g[ch * src.size() + p];
  });
}

// ------------------------------------------------------------------ losses

// Elementwise binary cross-entropy on logits: max(z,0) - z*y + log(1 + e^-|z|).
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, std::vector<T> targets) {
  if (targets.size() != logits.numel()) throw DimensionError("bce_with_logits: target count mismatch");
  const auto& zv = logits.value();
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < zv.numel(); ++i)
    out[i] = std::max(zv[i], T(0)) - zv[i] * targets[i] + std::log1p(std::exp(-std::abs(zv[i])));
  return logits.tape().record("bce_with_logits", std::move(out), {logits},
                              [logits, targets](Tape<T>& t, const std::vector<T>& g) {
                                T* gz = t.accum(logits);
                                if (!gz) return;
                                const auto& zv = logits.value();
                                for (std::size_t i = 0; i < g.size(); ++i) {
                                  const T z = zv[i];
                                  const T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
                                  gz[i] += g[i] * (s - targets[i]);
                                }
                              });
}

// Elementwise smooth-L1 (Huber with transition at beta).
template <typename T>
Var<T> smooth_l1(const Var<T>& x, std::vector<T> target, T beta) {
  if (target.size() != x.numel()) throw DimensionError("smooth_l1: target count mismatch");
  const auto& xv = x.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const T d = std::abs(xv[i] - target[i]);
    out[i] = d < beta ? T(0.5) * d * d / beta : d - T(0.5) * beta;
  }
  return x.tape().record("smooth_l1", std::move(out), {x}, [x, target, beta](Tape<T>& t, const std::vector<T>& g) {
    T* gx = t.accum(x);
    if (!gx) return;
    const auto& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T d = xv[i] - target[i];
      const T dd = std::abs(d) < beta ? d / beta : (d > T(0) ? T(1) : T(-1));
      gx[i] += g[i] * dd;
    }
  });
}

}  // namespace ag
}  // namespace sonoqa
