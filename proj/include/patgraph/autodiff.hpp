#pragma once

// Reverse-mode automatic differentiation over small dense tensors.
//
// A Tape records every op applied to its Vars together with a closure that
// propagates gradients back to the op inputs. Ops view a tensor as a matrix
// of rows() x cols(), where cols() is the last dimension; axis 0 reduces over
// rows and axis 1 over columns.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "patgraph/error.hpp"
#include "patgraph/rng.hpp"

namespace patgraph {

template <typename Real>
struct Tensor {
  std::vector<size_t> shape;
  std::vector<Real> data;

  Tensor() = default;
  explicit Tensor(std::vector<size_t> s, Real fill = Real(0)) : shape(std::move(s)) {
    data.assign(count(shape), fill);
  }
  Tensor(std::vector<size_t> s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != count(shape)) throw ShapeError("tensor data length does not match shape");
  }

  static Tensor matrix(size_t rows, size_t cols, Real fill = Real(0)) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor scalar(Real v) { return Tensor({1, 1}, v); }
  static Tensor row(std::vector<Real> v) {
    const size_t n = v.size();
    return Tensor({1, n}, std::move(v));
  }

  static size_t count(const std::vector<size_t>& s) {
    return std::accumulate(s.begin(), s.end(), size_t{1}, std::multiplies<>());
  }

  size_t size() const { return data.size(); }
  size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  Real& at(size_t r, size_t c) { return data[r * cols() + c]; }
  Real at(size_t r, size_t c) const { return data[r * cols() + c]; }
  Real* row_ptr(size_t r) { return data.data() + r * cols(); }
  const Real* row_ptr(size_t r) const { return data.data() + r * cols(); }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](Real v) { return std::isfinite(v); });
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> t;
    t.shape = shape;
    t.data.assign(data.begin(), data.end());
    return t;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

namespace kernels {

/// Dot product with eight independent accumulators; the fixed association
/// order keeps results reproducible while letting the compiler vectorize.
template <typename Real>
inline Real dot(const Real* a, const Real* b, size_t n) {
  Real acc[8] = {};
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  Real tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename Real>
inline void axpy(Real alpha, const Real* x, Real* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

/// C[m x n] += A[m x k] * B[k x n]
template <typename Real>
inline void gemm_nn(const Real* a, const Real* b, Real* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    Real* ci = c + i * n;
    const Real* ai = a + i * k;
    for (size_t p = 0; p < k; ++p) {
      const Real v = ai[p];
      if (v != Real(0)) axpy(v, b + p * n, ci, n);
    }
  }
}

/// C[m x k] += G[m x n] * B[k x n]^T
template <typename Real>
inline void gemm_nt(const Real* g, const Real* b, Real* c, size_t m, size_t n, size_t k) {
  for (size_t i = 0; i < m; ++i) {
    const Real* gi = g + i * n;
    Real* ci = c + i * k;
    for (size_t p = 0; p < k; ++p) ci[p] += dot(gi, b + p * n, n);
  }
}

/// C[k x n] += A[m x k]^T * G[m x n]
template <typename Real>
inline void gemm_tn(const Real* a, const Real* g, Real* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const Real* ai = a + i * k;
    const Real* gi = g + i * n;
    for (size_t p = 0; p < k; ++p) {
      const Real v = ai[p];
      if (v != Real(0)) axpy(v, gi, c + p * n, n);
    }
  }
}

}  // namespace kernels

struct Var {
  uint32_t index = 0;
};

template <typename Real>
class Tape {
 public:
  using TensorT = Tensor<Real>;
  using Backward = std::function<void(Tape&, uint32_t)>;

  /// `record` = false skips gradient bookkeeping (inference).
  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  Var constant(TensorT value) { return push(std::move(value), false, "constant"); }

  /// Leaf bound to an external parameter tensor (not copied). Its gradient
  /// is reported under `slot` by param_grads().
  Var param(const TensorT& p, int slot) {
    Node n;
    n.external = &p;
    n.requires_grad = record_;
    n.slot = slot;
    n.op = "param";
    nodes_.push_back(std::move(n));
    return Var{static_cast<uint32_t>(nodes_.size() - 1)};
  }

  /// Leaf that owns its value and requires a gradient (used by tests).
  Var variable(TensorT value) { return push(std::move(value), record_, "variable"); }

  const TensorT& value(Var v) const {
    const Node& n = nodes_[v.index];
    return n.external ? *n.external : n.value;
  }
  const std::vector<size_t>& shape(Var v) const { return value(v).shape; }
  bool requires_grad(Var v) const { return nodes_[v.index].requires_grad; }

  /// Gradient buffer of v, zero-allocated on first access.
  TensorT& grad(Var v) { return grad(v.index); }
  TensorT& grad(uint32_t i) {
    Node& n = nodes_[i];
    if (n.grad.data.empty() && value_of(i).size() > 0) n.grad = TensorT(value_of(i).shape);
    return n.grad;
  }
  bool has_grad(Var v) const { return !nodes_[v.index].grad.data.empty(); }

  /// Records an op result. `backward` may be empty when no input needs a
  /// gradient.
  Var record(TensorT value, bool requires_grad, const char* op, Backward backward) {
    if (check_finite_ && !value.all_finite()) {
      throw NumericFault(std::string("non-finite output from op '") + op + "' (node " +
                         std::to_string(nodes_.size()) + ")");
    }
    Var v = push(std::move(value), requires_grad && record_, op);
    if (nodes_[v.index].requires_grad) nodes_[v.index].backward = std::move(backward);
    return v;
  }

  void set_check_finite(bool on) { check_finite_ = on; }

  /// Reverse pass from a scalar loss.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw ShapeError("backward: loss must be a scalar");
    TensorT seed(value(loss).shape, Real(1));
    backward(loss, seed);
  }

  /// Reverse pass seeded with an explicit output gradient.
  void backward(Var out, const TensorT& seed) {
    if (seed.size() != value(out).size()) throw ShapeError("backward: seed shape mismatch");
    if (!nodes_[out.index].requires_grad) return;
    TensorT& g = grad(out);
    for (size_t i = 0; i < seed.size(); ++i) g.data[i] += seed.data[i];
    for (size_t i = out.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.data.empty()) continue;
      n.backward(*this, static_cast<uint32_t>(i));
    }
  }

  /// Calls fn(slot, grad) for every parameter leaf that received a gradient,
  /// in recording order.
  template <typename Fn>
  void param_grads(Fn&& fn) const {
    for (const Node& n : nodes_) {
      if (n.slot >= 0 && !n.grad.data.empty()) fn(n.slot, n.grad);
    }
  }

  size_t size() const { return nodes_.size(); }
  const char* op_name(Var v) const { return nodes_[v.index].op; }

 private:
  struct Node {
    TensorT value;
    const TensorT* external = nullptr;
    TensorT grad;
    Backward backward;
    bool requires_grad = false;
    int slot = -1;
    const char* op = "";
  };

  const TensorT& value_of(uint32_t i) const {
    const Node& n = nodes_[i];
    return n.external ? *n.external : n.value;
  }

  Var push(TensorT value, bool requires_grad, const char* op) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var{static_cast<uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  bool record_;
  bool check_finite_ = true;
};

// ---------------------------------------------------------------------------
// Primitive ops

namespace ad {

namespace detail {

inline std::string shape_str(const std::vector<size_t>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// How operand b broadcasts against a of shape m x n.
enum class Bcast { Same, Row, Col, Scalar };

template <typename Real>
Bcast broadcast_kind(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  const size_t m = a.rows(), n = a.cols();
  if (b.size() == a.size() && b.cols() == n) return Bcast::Same;
  if (b.size() == 1) return Bcast::Scalar;
  if (b.rows() == 1 && b.cols() == n) return Bcast::Row;
  if (b.cols() == 1 && b.rows() == m) return Bcast::Col;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape) + " to " +
                   shape_str(a.shape));
}

template <typename Real>
size_t bindex(Bcast k, size_t r, size_t c, size_t n) {
  switch (k) {
    case Bcast::Same: return r * n + c;
    case Bcast::Row: return c;
    case Bcast::Col: return r;
    case Bcast::Scalar: return 0;
  }
  return 0;
}

/// Elementwise unary op with derivative expressed through input x and output y.
template <typename Real, typename F, typename DF>
Var unary(Tape<Real>& t, Var x, const char* op, F f, DF df) {
  const auto& xv = t.value(x);
  Tensor<Real> y(xv.shape);
  for (size_t i = 0; i < y.size(); ++i) y.data[i] = f(xv.data[i]);
  return t.record(std::move(y), t.requires_grad(x), op, [x, df](Tape<Real>& tp, uint32_t self) {
    const auto& xv = tp.value(x);
    const auto& yv = tp.value(Var{self});
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(x);
    for (size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * df(xv.data[i], yv.data[i]);
  });
}

}  // namespace detail

template <typename Real>
Var matmul(Tape<Real>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  const size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw ShapeError("matmul: " + detail::shape_str(av.shape) + " x " + detail::shape_str(bv.shape));
  }
  auto c = Tensor<Real>::matrix(m, n);
  kernels::gemm_nn(av.data.data(), bv.data.data(), c.data.data(), m, k, n);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(std::move(c), rg, "matmul", [a, b, m, k, n](Tape<Real>& tp, uint32_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(a)) {
      kernels::gemm_nt(g.data.data(), tp.value(b).data.data(), tp.grad(a).data.data(), m, n, k);
    }
    if (tp.requires_grad(b)) {
      kernels::gemm_tn(tp.value(a).data.data(), g.data.data(), tp.grad(b).data.data(), m, k, n);
    }
  });
}

template <typename Real>
Var add(Tape<Real>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  const auto k = detail::broadcast_kind(av, bv, "add");
  const size_t n = av.cols();
  Tensor<Real> y(av.shape);
  for (size_t i = 0; i < y.size(); ++i) {
    y.data[i] = av.data[i] + bv.data[detail::bindex<Real>(k, i / n, i % n, n)];
  }
  return t.record(std::move(y), t.requires_grad(a) || t.requires_grad(b), "add",
                  [a, b, k](Tape<Real>& tp, uint32_t self) {
                    const auto& g = tp.grad(self);
                    const size_t n = g.cols();
                    if (tp.requires_grad(a)) {
                      auto& ga = tp.grad(a);
                      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
                    }
                    if (tp.requires_grad(b)) {
                      auto& gb = tp.grad(b);
                      for (size_t i = 0; i < g.size(); ++i) {
                        gb.data[detail::bindex<Real>(k, i / n, i % n, n)] += g.data[i];
                      }
                    }
                  });
}

template <typename Real>
Var sub(Tape<Real>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  const auto k = detail::broadcast_kind(av, bv, "sub");
  const size_t n = av.cols();
  Tensor<Real> y(av.shape);
  for (size_t i = 0; i < y.size(); ++i) {
    y.data[i] = av.data[i] - bv.data[detail::bindex<Real>(k, i / n, i % n, n)];
  }
  return t.record(std::move(y), t.requires_grad(a) || t.requires_grad(b), "sub",
                  [a, b, k](Tape<Real>& tp, uint32_t self) {
                    const auto& g = tp.grad(self);
                    const size_t n = g.cols();
                    if (tp.requires_grad(a)) {
                      auto& ga = tp.grad(a);
                      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
                    }
                    if (tp.requires_grad(b)) {
                      auto& gb = tp.grad(b);
                      for (size_t i = 0; i < g.size(); ++i) {
                        gb.data[detail::bindex<Real>(k, i / n, i % n, n)] -= g.data[i];
                      }
                    }
                  });
}

/// Elementwise product; b may broadcast as a row, column or scalar.
template <typename Real>
Var mul(Tape<Real>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  const auto k = detail::broadcast_kind(av, bv, "mul");
  const size_t n = av.cols();
  Tensor<Real> y(av.shape);
  for (size_t i = 0; i < y.size(); ++i) {
    y.data[i] = av.data[i] * bv.data[detail::bindex<Real>(k, i / n, i % n, n)];
  }
  return t.record(std::move(y), t.requires_grad(a) || t.requires_grad(b), "mul",
                  [a, b, k](Tape<Real>& tp, uint32_t self) {
                    const auto& g = tp.grad(self);
                    const auto& av = tp.value(a);
                    const auto& bv = tp.value(b);
                    const size_t n = g.cols();
                    if (tp.requires_grad(a)) {
                      auto& ga = tp.grad(a);
                      for (size_t i = 0; i < g.size(); ++i) {
                        ga.data[i] += g.data[i] * bv.data[detail::bindex<Real>(k, i / n, i % n, n)];
                      }
                    }
                    if (tp.requires_grad(b)) {
                      auto& gb = tp.grad(b);
                      for (size_t i = 0; i < g.size(); ++i) {
                        gb.data[detail::bindex<Real>(k, i / n, i % n, n)] += g.data[i] * av.data[i];
                      }
                    }
                  });
}

template <typename Real>
Var scale(Tape<Real>& t, Var x, Real s) {
  return detail::unary(
      t, x, "scale", [s](Real v) { return v * s; }, [s](Real, Real) { return s; });
}

template <typename Real>
Var add_scalar(Tape<Real>& t, Var x, Real s) {
  return detail::unary(
      t, x, "add_scalar", [s](Real v) { return v + s; }, [](Real, Real) { return Real(1); });
}

template <typename Real>
Var exp(Tape<Real>& t, Var x) {
  return detail::unary(
      t, x, "exp", [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

template <typename Real>
Var log(Tape<Real>& t, Var x) {
  return detail::unary(
      t, x, "log", [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

template <typename Real>
Var sigmoid(Tape<Real>& t, Var x) {
  return detail::unary(
      t, x, "sigmoid", [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <typename Real>
Var relu(Tape<Real>& t, Var x) {
  return detail::unary(
      t, x, "relu", [](Real v) { return v > Real(0) ? v : Real(0); },
      [](Real v, Real) { return v > Real(0) ? Real(1) : Real(0); });
}

/// Exact GELU: x * Phi(x) with Phi(x) = (1 + erf(x / sqrt(2))) / 2.
template <typename Real>
Var gelu(Tape<Real>& t, Var x) {
  return detail::unary(
      t, x, "gelu",
      [](Real v) { return Real(0.5) * v * (Real(1) + std::erf(v * Real(M_SQRT1_2))); },
      [](Real v, Real) {
        const Real cdf = Real(0.5) * (Real(1) + std::erf(v * Real(M_SQRT1_2)));
        const Real pdf = std::exp(Real(-0.5) * v * v) * Real(0.5 * M_2_SQRTPI * M_SQRT1_2);
        return cdf + v * pdf;
      });
}

/// Softmax along axis 1 (within each row) or axis 0 (within each column),
/// with max subtraction.
template <typename Real>
Var softmax(Tape<Real>& t, Var x, int axis = 1) {
  const auto& xv = t.value(x);
  const size_t m = xv.rows(), n = xv.cols();
  Tensor<Real> y(xv.shape);
  const size_t outer = axis == 1 ? m : n;
  const size_t inner = axis == 1 ? n : m;
  auto idx = [&](size_t o, size_t i) { return axis == 1 ? o * n + i : i * n + o; };
  for (size_t o = 0; o < outer; ++o) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (size_t i = 0; i < inner; ++i) mx = std::max(mx, xv.data[idx(o, i)]);
    Real sum = 0;
    for (size_t i = 0; i < inner; ++i) {
      const Real e = std::exp(xv.data[idx(o, i)] - mx);
      y.data[idx(o, i)] = e;
      sum += e;
    }
    for (size_t i = 0; i < inner; ++i) y.data[idx(o, i)] /= sum;
  }
  return t.record(std::move(y), t.requires_grad(x), "softmax",
                  [x, axis, m, n](Tape<Real>& tp, uint32_t self) {
                    const auto& yv = tp.value(Var{self});
                    const auto& g = tp.grad(self);
                    auto& gx = tp.grad(x);
                    const size_t outer = axis == 1 ? m : n;
                    const size_t inner = axis == 1 ? n : m;
                    auto idx = [&](size_t o, size_t i) { return axis == 1 ? o * n + i : i * n + o; };
                    for (size_t o = 0; o < outer; ++o) {
                      Real s = 0;
                      for (size_t i = 0; i < inner; ++i) s += g.data[idx(o, i)] * yv.data[idx(o, i)];
                      for (size_t i = 0; i < inner; ++i) {
                        gx.data[idx(o, i)] += yv.data[idx(o, i)] * (g.data[idx(o, i)] - s);
                      }
                    }
                  });
}

/// Row-wise normalization to zero mean and unit variance (no affine part).
template <typename Real>
Var layer_norm(Tape<Real>& t, Var x, Real eps = Real(1e-5)) {
  const auto& xv = t.value(x);
  const size_t m = xv.rows(), n = xv.cols();
  Tensor<Real> y(xv.shape);
  std::vector<Real> inv_std(m);
  for (size_t r = 0; r < m; ++r) {
    const Real* xr = xv.row_ptr(r);
    Real mean = 0;
    for (size_t c = 0; c < n; ++c) mean += xr[c];
    mean /= Real(n);
    Real var = 0;
    for (size_t c = 0; c < n; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= Real(n);
    inv_std[r] = Real(1) / std::sqrt(var + eps);
    Real* yr = y.row_ptr(r);
    for (size_t c = 0; c < n; ++c) yr[c] = (xr[c] - mean) * inv_std[r];
  }
  return t.record(std::move(y), t.requires_grad(x), "layer_norm",
                  [x, inv_std = std::move(inv_std), m, n](Tape<Real>& tp, uint32_t self) {
                    const auto& yv = tp.value(Var{self});
                    const auto& g = tp.grad(self);
                    auto& gx = tp.grad(x);
                    for (size_t r = 0; r < m; ++r) {
                      const Real* gr = g.row_ptr(r);
                      const Real* yr = yv.row_ptr(r);
                      Real mg = 0, mgy = 0;
                      for (size_t c = 0; c < n; ++c) {
                        mg += gr[c];
                        mgy += gr[c] * yr[c];
                      }
                      mg /= Real(n);
                      mgy /= Real(n);
                      Real* gxr = gx.row_ptr(r);
                      for (size_t c = 0; c < n; ++c) gxr[c] += inv_std[r] * (gr[c] - mg - yr[c] * mgy);
                    }
                  });
}

/// Each row scaled to unit L2 norm.
template <typename Real>
Var l2_normalize(Tape<Real>& t, Var x, Real eps = Real(1e-12)) {
  const auto& xv = t.value(x);
  const size_t m = xv.rows(), n = xv.cols();
  Tensor<Real> y(xv.shape);
  std::vector<Real> norms(m);
  for (size_t r = 0; r < m; ++r) {
    const Real* xr = xv.row_ptr(r);
    norms[r] = std::max(std::sqrt(kernels::dot(xr, xr, n)), eps);
    Real* yr = y.row_ptr(r);
    for (size_t c = 0; c < n; ++c) yr[c] = xr[c] / norms[r];
  }
  return t.record(std::move(y), t.requires_grad(x), "l2_normalize",
                  [x, norms = std::move(norms), m, n](Tape<Real>& tp, uint32_t self) {
                    const auto& yv = tp.value(Var{self});
                    const auto& g = tp.grad(self);
                    auto& gx = tp.grad(x);
                    for (size_t r = 0; r < m; ++r) {
                      const Real* gr = g.row_ptr(r);
                      const Real* yr = yv.row_ptr(r);
                      const Real d = kernels::dot(gr, yr, n);
                      Real* gxr = gx.row_ptr(r);
                      for (size_t c = 0; c < n; ++c) gxr[c] += (gr[c] - yr[c] * d) / norms[r];
                    }
                  });
}

/// Sum of all elements, as a 1 x 1 tensor.
template <typename Real>
Var sum(Tape<Real>& t, Var x) {
  const auto& xv = t.value(x);
  Real s = 0;
  for (Real v : xv.data) s += v;
  return t.record(Tensor<Real>::scalar(s), t.requires_grad(x), "sum",
                  [x](Tape<Real>& tp, uint32_t self) {
                    const Real g = tp.grad(self).data[0];
                    for (auto& v : tp.grad(x).data) v += g;
                  });
}

template <typename Real>
Var mean(Tape<Real>& t, Var x) {
  const size_t n = t.value(x).size();
  return scale(t, sum(t, x), Real(1) / Real(n));
}

/// Sum along axis 0 (result 1 x n) or axis 1 (result m x 1).
template <typename Real>
Var sum(Tape<Real>& t, Var x, int axis) {
  const auto& xv = t.value(x);
  const size_t m = xv.rows(), n = xv.cols();
  auto y = axis == 0 ? Tensor<Real>::matrix(1, n) : Tensor<Real>::matrix(m, 1);
  for (size_t r = 0; r < m; ++r) {
    for (size_t c = 0; c < n; ++c) y.data[axis == 0 ? c : r] += xv.data[r * n + c];
  }
  return t.record(std::move(y), t.requires_grad(x), "sum_axis",
                  [x, axis, m, n](Tape<Real>& tp, uint32_t self) {
                    const auto& g = tp.grad(self);
                    auto& gx = tp.grad(x);
                    for (size_t r = 0; r < m; ++r) {
                      for (size_t c = 0; c < n; ++c) gx.data[r * n + c] += g.data[axis == 0 ? c : r];
                    }
                  });
}

template <typename Real>
Var mean(Tape<Real>& t, Var x, int axis) {
  const auto& xv = t.value(x);
  const size_t len = axis == 0 ? xv.rows() : xv.cols();
  return scale(t, sum(t, x, axis), Real(1) / Real(len));
}

/// Max along an axis; the gradient flows to the first maximal element.
template <typename Real>
Var max(Tape<Real>& t, Var x, int axis) {
  const auto& xv = t.value(x);
  const size_t m = xv.rows(), n = xv.cols();
  const size_t outer = axis == 0 ? n : m;
  const size_t inner = axis == 0 ? m : n;
  auto y = axis == 0 ? Tensor<Real>::matrix(1, n) : Tensor<Real>::matrix(m, 1);
  std::vector<size_t> arg(outer);
  for (size_t o = 0; o < outer; ++o) {
    size_t best = axis == 0 ? o : o * n;
    for (size_t i = 1; i < inner; ++i) {
      const size_t j = axis == 0 ? i * n + o : o * n + i;
      if (xv.data[j] > xv.data[best]) best = j;
    }
    arg[o] = best;
    y.data[o] = xv.data[best];
  }
  return t.record(std::move(y), t.requires_grad(x), "max_axis",
                  [x, arg = std::move(arg)](Tape<Real>& tp, uint32_t self) {
                    const auto& g = tp.grad(self);
                    auto& gx = tp.grad(x);
                    for (size_t o = 0; o < arg.size(); ++o) gx.data[arg[o]] += g.data[o];
                  });
}

/// Concatenation of 2-D tensors along axis 0 (stack rows) or 1 (join columns).
template <typename Real>
Var concat(Tape<Real>& t, const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto& first = t.value(parts[0]);
  size_t rows = 0, cols = 0;
  bool rg = false;
  for (Var p : parts) {
    const auto& v = t.value(p);
    rg = rg || t.requires_grad(p);
    if (axis == 0) {
      if (v.cols() != first.cols()) throw ShapeError("concat axis 0: column mismatch");
      rows += v.rows();
      cols = v.cols();
    } else {
      if (v.rows() != first.rows()) throw ShapeError("concat axis 1: row mismatch");
      cols += v.cols();
      rows = v.rows();
    }
  }
  auto y = Tensor<Real>::matrix(rows, cols);
  size_t off = 0;
  for (Var p : parts) {
    const auto& v = t.value(p);
    for (size_t r = 0; r < v.rows(); ++r) {
      for (size_t c = 0; c < v.cols(); ++c) {
        if (axis == 0) {
          y.at(off + r, c) = v.at(r, c);
        } else {
          y.at(r, off + c) = v.at(r, c);
        }
      }
    }
    off += axis == 0 ? v.rows() : v.cols();
  }
  return t.record(std::move(y), rg, "concat", [parts, axis](Tape<Real>& tp, uint32_t self) {
    const auto& g = tp.grad(self);
    size_t off = 0;
    for (Var p : parts) {
      const size_t pr = tp.value(p).rows(), pc = tp.value(p).cols();
      if (tp.requires_grad(p)) {
        auto& gp = tp.grad(p);
        for (size_t r = 0; r < pr; ++r) {
          for (size_t c = 0; c < pc; ++c) {
            gp.at(r, c) += axis == 0 ? g.at(off + r, c) : g.at(r, off + c);
          }
        }
      }
      off += axis == 0 ? pr : pc;
    }
  });
}

/// out[i] = x[indices[i]]
template <typename Real>
Var gather_rows(Tape<Real>& t, Var x, std::vector<uint32_t> indices) {
  const auto& xv = t.value(x);
  const size_t n = xv.cols();
  auto y = Tensor<Real>::matrix(indices.size(), n);
  for (size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= xv.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " out of range " +
                       std::to_string(xv.rows()));
    }
    std::copy_n(xv.row_ptr(indices[i]), n, y.row_ptr(i));
  }
  return t.record(std::move(y), t.requires_grad(x), "gather_rows",
                  [x, idx = std::move(indices), n](Tape<Real>& tp, uint32_t self) {
                    const auto& g = tp.grad(self);
                    auto& gx = tp.grad(x);
                    for (size_t i = 0; i < idx.size(); ++i) {
                      kernels::axpy(Real(1), g.row_ptr(i), gx.row_ptr(idx[i]), n);
                    }
                  });
}

/// out[s] = sum of rows e with segment[e] == s, accumulated in row order.
template <typename Real>
Var segment_sum(Tape<Real>& t, Var x, std::vector<uint32_t> segment, size_t n_segments) {
  const auto& xv = t.value(x);
  if (segment.size() != xv.rows()) throw ShapeError("segment_sum: segment ids length mismatch");
  const size_t n = xv.cols();
  auto y = Tensor<Real>::matrix(n_segments, n);
  for (size_t e = 0; e < segment.size(); ++e) {
    if (segment[e] >= n_segments) throw ShapeError("segment_sum: segment id out of range");
    kernels::axpy(Real(1), xv.row_ptr(e), y.row_ptr(segment[e]), n);
  }
  return t.record(std::move(y), t.requires_grad(x), "segment_sum",
                  [x, seg = std::move(segment), n](Tape<Real>& tp, uint32_t self) {
                    const auto& g = tp.grad(self);
                    auto& gx = tp.grad(x);
                    for (size_t e = 0; e < seg.size(); ++e) {
                      kernels::axpy(Real(1), g.row_ptr(seg[e]), gx.row_ptr(e), n);
                    }
                  });
}

/// Column-wise max over the rows of each segment; empty segments yield 0.
template <typename Real>
Var segment_max(Tape<Real>& t, Var x, std::vector<uint32_t> segment, size_t n_segments) {
  const auto& xv = t.value(x);
  if (segment.size() != xv.rows()) throw ShapeError("segment_max: segment ids length mismatch");
  const size_t n = xv.cols();
  auto y = Tensor<Real>::matrix(n_segments, n);
  std::vector<int64_t> arg(n_segments * n, -1);
  for (size_t e = 0; e < segment.size(); ++e) {
    const size_t s = segment[e];
    if (s >= n_segments) throw ShapeError("segment_max: segment id out of range");
    for (size_t c = 0; c < n; ++c) {
      int64_t& a = arg[s * n + c];
      if (a < 0 || xv.data[e * n + c] > xv.data[static_cast<size_t>(a)]) {
        a = static_cast<int64_t>(e * n + c);
      }
    }
  }
  for (size_t i = 0; i < arg.size(); ++i) {
    if (arg[i] >= 0) y.data[i] = xv.data[static_cast<size_t>(arg[i])];
  }
  return t.record(std::move(y), t.requires_grad(x), "segment_max",
                  [x, arg = std::move(arg)](Tape<Real>& tp, uint32_t self) {
                    const auto& g = tp.grad(self);
                    auto& gx = tp.grad(x);
                    for (size_t i = 0; i < arg.size(); ++i) {
                      if (arg[i] >= 0) gx.data[static_cast<size_t>(arg[i])] += g.data[i];
                    }
                  });
}

/// Softmax over the rows of each segment, independently per column.
template <typename Real>
Var segment_softmax(Tape<Real>& t, Var x, std::vector<uint32_t> segment, size_t n_segments) {
  const auto& xv = t.value(x);
  if (segment.size() != xv.rows()) throw ShapeError("segment_softmax: segment ids length mismatch");
  const size_t n = xv.cols();
  std::vector<Real> mx(n_segments * n, -std::numeric_limits<Real>::infinity());
  for (size_t e = 0; e < segment.size(); ++e) {
    if (segment[e] >= n_segments) throw ShapeError("segment_softmax: segment id out of range");
    for (size_t c = 0; c < n; ++c) {
      Real& m = mx[segment[e] * n + c];
      m = std::max(m, xv.data[e * n + c]);
    }
  }
  Tensor<Real> y(xv.shape);
  std::vector<Real> denom(n_segments * n, Real(0));
  for (size_t e = 0; e < segment.size(); ++e) {
    for (size_t c = 0; c < n; ++c) {
      const Real v = std::exp(xv.data[e * n + c] - mx[segment[e] * n + c]);
      y.data[e * n + c] = v;
      denom[segment[e] * n + c] += v;
    }
  }
  for (size_t e = 0; e < segment.size(); ++e) {
    for (size_t c = 0; c < n; ++c) y.data[e * n + c] /= denom[segment[e] * n + c];
  }
  return t.record(std::move(y), t.requires_grad(x), "segment_softmax",
                  [x, seg = std::move(segment), n_segments, n](Tape<Real>& tp, uint32_t self) {
                    const auto& yv = tp.value(Var{self});
                    const auto& g = tp.grad(self);
                    auto& gx = tp.grad(x);
                    std::vector<Real> dot(n_segments * n, Real(0));
                    for (size_t e = 0; e < seg.size(); ++e) {
                      for (size_t c = 0; c < n; ++c) {
                        dot[seg[e] * n + c] += g.data[e * n + c] * yv.data[e * n + c];
                      }
                    }
                    for (size_t e = 0; e < seg.size(); ++e) {
                      for (size_t c = 0; c < n; ++c) {
                        gx.data[e * n + c] +=
                            yv.data[e * n + c] * (g.data[e * n + c] - dot[seg[e] * n + c]);
                      }
                    }
                  });
}

/// Same data, new shape.
template <typename Real>
Var reshape(Tape<Real>& t, Var x, std::vector<size_t> shape) {
  const auto& xv = t.value(x);
  if (Tensor<Real>::count(shape) != xv.size()) {
    throw ShapeError("reshape: " + detail::shape_str(xv.shape) + " to " + detail::shape_str(shape));
  }
  Tensor<Real> y(std::move(shape), xv.data);
  return t.record(std::move(y), t.requires_grad(x), "reshape", [x](Tape<Real>& tp, uint32_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(x);
    for (size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i];
  });
}

/// Columns [begin, end) of a 2-D tensor.
template <typename Real>
Var slice_cols(Tape<Real>& t, Var x, size_t begin, size_t end) {
  const auto& xv = t.value(x);
  const size_t m = xv.rows(), n = xv.cols();
  if (begin >= end || end > n) throw ShapeError("slice_cols: bad column range");
  const size_t w = end - begin;
  auto y = Tensor<Real>::matrix(m, w);
  for (size_t r = 0; r < m; ++r) std::copy_n(xv.row_ptr(r) + begin, w, y.row_ptr(r));
  return t.record(std::move(y), t.requires_grad(x), "slice_cols",
                  [x, begin, w, m](Tape<Real>& tp, uint32_t self) {
                    const auto& g = tp.grad(self);
                    auto& gx = tp.grad(x);
                    for (size_t r = 0; r < m; ++r) {
                      kernels::axpy(Real(1), g.row_ptr(r), gx.row_ptr(r) + begin, w);
                    }
                  });
}

/// Inverted dropout: kept entries are scaled by 1 / (1 - p).
template <typename Real>
Var dropout(Tape<Real>& t, Var x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw UsageError("dropout probability must be < 1");
  const auto& xv = t.value(x);
  Tensor<Real> mask(xv.shape);
  const Real keep = Real(1.0 / (1.0 - p));
  for (auto& m : mask.data) m = rng.bernoulli(p) ? Real(0) : keep;
  Var mv = t.constant(std::move(mask));
  return mul(t, x, mv);
}

}  // namespace ad
}  // namespace patgraph
