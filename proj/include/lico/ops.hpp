#pragma once

// Differentiable operations over BasicTensor.
//
// Broadcasting is limited to what the model needs: scalar constants, a
// 1-element tensor multiplier, and row-vector bias addition.

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lico/kernels.hpp"
#include "lico/tensor.hpp"

namespace lico {

/// Records which side of every piecewise-linear branch (ReLU, floors) a
/// forward pass took on this thread. Finite-difference checkers compare two
/// recordings to detect probes that straddle a kink.
class BranchRecorder {
 public:
  BranchRecorder() : previous_(current_) { current_ = this; }
  ~BranchRecorder() { current_ = previous_; }
  BranchRecorder(const BranchRecorder&) = delete;
  BranchRecorder& operator=(const BranchRecorder&) = delete;

  const std::vector<bool>& bits() const { return bits_; }

  static void note(bool taken) {
    if (current_) current_->bits_.push_back(taken);
  }
  static bool active() { return current_ != nullptr; }

 private:
  std::vector<bool> bits_;
  BranchRecorder* previous_;
  static inline thread_local BranchRecorder* current_ = nullptr;
};

namespace ops {
namespace detail {

template <class Real>
using NodePtr = std::shared_ptr<TensorNode<Real>>;

template <class Real>
Tape<Real>* recording_tape(std::initializer_list<const BasicTensor<Real>*> inputs) {
  Tape<Real>* tape = Tape<Real>::active();
  if (!tape) return nullptr;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

template <class Real, class Fn>
void record(Tape<Real>* tape, BasicTensor<Real>& out,
            std::initializer_list<const BasicTensor<Real>*> inputs, Fn&& fn) {
  out.node()->requires_grad = true;
  out.node()->is_leaf = false;
  std::vector<NodePtr<Real>> nodes;
  nodes.reserve(inputs.size());
  for (const auto* t : inputs) nodes.push_back(t->node());
  tape->record(out.node(), std::move(nodes), std::forward<Fn>(fn));
}

// Gradient buffer of an input, or nullptr when it does not need one.
template <class Real>
Real* grad_target(const NodePtr<Real>& n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class Real>
void require_rank(const BasicTensor<Real>& x, std::size_t rank, const char* op) {
  require(x.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_str(x.shape()));
}

template <class Real>
void require_same_shape(const BasicTensor<Real>& a, const BasicTensor<Real>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <class Real>
std::vector<Real> transpose_data(std::span<const Real> x, std::size_t rows, std::size_t cols) {
  std::vector<Real> t(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = x[r * cols + c];
  return t;
}

// Elementwise unary op with derivative expressed through (x, y).
template <class Real, class F, class DF>
BasicTensor<Real> unary(const BasicTensor<Real>& x, F f, DF df) {
  auto out = BasicTensor<Real>::zeros(x.shape());
  auto y = out.mutable_data();
  const auto xs = x.data();
  for (std::size_t i = 0; i < xs.size(); ++i) y[i] = f(xs[i]);
  if (auto* tape = recording_tape({&x})) {
    record(tape, out, {&x}, [xn = x.node(), df](TensorNode<Real>& o) {
      Real* dx = grad_target(xn);
      if (!dx) return;
      for (std::size_t i = 0; i < o.data.size(); ++i) dx[i] += o.grad[i] * df(xn->data[i], o.data[i]);
    });
  }
  return out;
}

}  // namespace detail

/// (m x k) * (k x n)
template <class Real>
BasicTensor<Real> matmul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  detail::require(b.dim(0) == k, "matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                                     shape_str(b.shape()));
  auto out = BasicTensor<Real>::zeros({m, n});
  kernels::parallel::matmul<Real>(m, k, n, a.data(), b.data(), out.mutable_data());
  if (auto* tape = detail::recording_tape({&a, &b})) {
    detail::record(tape, out, {&a, &b}, [an = a.node(), bn = b.node(), m, k, n](TensorNode<Real>& o) {
      if (Real* da = detail::grad_target(an)) {
        const auto bt = detail::transpose_data<Real>(bn->data, k, n);
        std::vector<Real> tmp(m * k);
        kernels::parallel::matmul<Real>(m, n, k, o.grad, bt, tmp);
        for (std::size_t i = 0; i < tmp.size(); ++i) da[i] += tmp[i];
      }
      if (Real* db = detail::grad_target(bn)) {
        const auto at = detail::transpose_data<Real>(an->data, m, k);
        std::vector<Real> tmp(k * n);
        kernels::parallel::matmul<Real>(k, m, n, at, o.grad, tmp);
        for (std::size_t i = 0; i < tmp.size(); ++i) db[i] += tmp[i];
      }
    });
  }
  return out;
}

/// x: C x H x W, weight: O x C x K x K, bias: O. Zero padding.
template <class Real>
BasicTensor<Real> conv2d(const BasicTensor<Real>& x, const BasicTensor<Real>& weight,
                         const BasicTensor<Real>& bias, std::size_t stride, std::size_t padding) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(weight, 4, "conv2d");
  detail::require_rank(bias, 1, "conv2d");
  detail::require(stride >= 1, "conv2d: stride must be positive");
  kernels::ConvGeometry g;
  g.in_channels = x.dim(0);
  g.in_height = x.dim(1);
  g.in_width = x.dim(2);
  g.out_channels = weight.dim(0);
  g.kernel = weight.dim(2);
  g.stride = stride;
  g.padding = padding;
  detail::require(weight.dim(1) == g.in_channels && weight.dim(3) == g.kernel,
                  "conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                      shape_str(x.shape()));
  detail::require(bias.dim(0) == g.out_channels, "conv2d: bias extent mismatch");
  detail::require(g.in_height + 2 * padding >= g.kernel && g.in_width + 2 * padding >= g.kernel,
                  "conv2d: kernel larger than padded input");
  auto out = BasicTensor<Real>::zeros({g.out_channels, g.out_height(), g.out_width()});
  kernels::parallel::conv2d_forward<Real>(g, x.data(), weight.data(), bias.data(),
                                          out.mutable_data());
  if (auto* tape = detail::recording_tape({&x, &weight, &bias})) {
    detail::record(tape, out, {&x, &weight, &bias},
                   [xn = x.node(), wn = weight.node(), bn = bias.node(), g](TensorNode<Real>& o) {
                     if (Real* dx = detail::grad_target(xn)) {
                       kernels::parallel::conv2d_backward_input<Real>(
                           g, o.grad, wn->data, std::span<Real>(dx, xn->data.size()));
                     }
                     Real* dw = detail::grad_target(wn);
                     Real* db = detail::grad_target(bn);
                     if (dw || db) {
                       std::vector<Real> wtmp;
                       std::span<Real> dws;
                       if (dw) {
                         dws = std::span<Real>(dw, wn->data.size());
                       } else {
                         wtmp.assign(wn->data.size(), Real{0});
                         dws = wtmp;
                       }
                       std::span<Real> dbs = db ? std::span<Real>(db, bn->data.size()) : std::span<Real>{};
                       kernels::parallel::conv2d_backward_weight<Real>(g, xn->data, o.grad, dws, dbs);
                     }
                   });
  }
  return out;
}

template <class Real>
BasicTensor<Real> relu(const BasicTensor<Real>& x) {
  if (BranchRecorder::active()) {
    for (const Real v : x.data()) BranchRecorder::note(v > Real{0});
  }
  return detail::unary(
      x, [](Real v) { return v > Real{0} ? v : Real{0}; },
      [](Real v, Real) { return v > Real{0} ? Real{1} : Real{0}; });
}

template <class Real>
BasicTensor<Real> exp(const BasicTensor<Real>& x) {
  return detail::unary(
      x, [](Real v) { return static_cast<Real>(std::exp(static_cast<double>(v))); },
      [](Real, Real y) { return y; });
}

/// Natural log; every element must be positive.
template <class Real>
BasicTensor<Real> log(const BasicTensor<Real>& x) {
  for (const Real v : x.data()) {
    if (!(v > Real{0})) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return detail::unary(
      x, [](Real v) { return static_cast<Real>(std::log(static_cast<double>(v))); },
      [](Real v, Real) { return Real{1} / v; });
}

/// log(max(x, floor)); gradient is zero where the floor is active.
template <class Real>
BasicTensor<Real> log_floored(const BasicTensor<Real>& x, Real floor) {
  if (BranchRecorder::active()) {
    for (const Real v : x.data()) BranchRecorder::note(v > floor);
  }
  return detail::unary(
      x,
      [floor](Real v) { return static_cast<Real>(std::log(static_cast<double>(std::max(v, floor)))); },
      [floor](Real v, Real) { return v > floor ? Real{1} / v : Real{0}; });
}

namespace detail {

template <class Real, class F, class DA, class DB>
BasicTensor<Real> binary(const BasicTensor<Real>& a, const BasicTensor<Real>& b, const char* name,
                         F f, DA da_fn, DB db_fn) {
  require_same_shape(a, b, name);
  auto out = BasicTensor<Real>::zeros(a.shape());
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(a[i], b[i]);
  if (auto* tape = recording_tape({&a, &b})) {
    record(tape, out, {&a, &b}, [an = a.node(), bn = b.node(), da_fn, db_fn](TensorNode<Real>& o) {
      Real* da = grad_target(an);
      Real* db = grad_target(bn);
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        if (da) da[i] += o.grad[i] * da_fn(an->data[i], bn->data[i]);
        if (db) db[i] += o.grad[i] * db_fn(an->data[i], bn->data[i]);
      }
    });
  }
  return out;
}

}  // namespace detail

template <class Real>
BasicTensor<Real> add(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return detail::binary(
      a, b, "add", [](Real x, Real y) { return x + y; }, [](Real, Real) { return Real{1}; },
      [](Real, Real) { return Real{1}; });
}

template <class Real>
BasicTensor<Real> sub(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return detail::binary(
      a, b, "sub", [](Real x, Real y) { return x - y; }, [](Real, Real) { return Real{1}; },
      [](Real, Real) { return Real{-1}; });
}

template <class Real>
BasicTensor<Real> mul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return detail::binary(
      a, b, "mul", [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
      [](Real x, Real) { return x; });
}

template <class Real>
BasicTensor<Real> div(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  for (const Real v : b.data()) {
    if (v == Real{0}) throw DomainError("div: zero divisor");
  }
  return detail::binary(
      a, b, "div", [](Real x, Real y) { return x / y; }, [](Real, Real y) { return Real{1} / y; },
      [](Real x, Real y) { return -x / (y * y); });
}

/// x * c for a constant c.
template <class Real>
BasicTensor<Real> scale(const BasicTensor<Real>& x, Real c) {
  return detail::unary(
      x, [c](Real v) { return v * c; }, [c](Real, Real) { return c; });
}

/// x + c for a constant c.
template <class Real>
BasicTensor<Real> add_scalar(const BasicTensor<Real>& x, Real c) {
  return detail::unary(
      x, [c](Real v) { return v + c; }, [](Real, Real) { return Real{1}; });
}

/// x * s where s is a differentiable 1-element tensor.
template <class Real>
BasicTensor<Real> mul_scalar(const BasicTensor<Real>& x, const BasicTensor<Real>& s) {
  detail::require(s.size() == 1, "mul_scalar: multiplier must have one element, got " +
                                     shape_str(s.shape()));
  const Real sv = s[0];
  auto out = BasicTensor<Real>::zeros(x.shape());
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * sv;
  if (auto* tape = detail::recording_tape({&x, &s})) {
    detail::record(tape, out, {&x, &s}, [xn = x.node(), sn = s.node()](TensorNode<Real>& o) {
      const Real sv = sn->data[0];
      if (Real* dx = detail::grad_target(xn)) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) dx[i] += o.grad[i] * sv;
      }
      if (Real* ds = detail::grad_target(sn)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < o.grad.size(); ++i)
          acc += static_cast<double>(o.grad[i]) * static_cast<double>(xn->data[i]);
        ds[0] += static_cast<Real>(acc);
      }
    });
  }
  return out;
}

/// x (m x n) + bias (n) broadcast over rows. A rank-1 x is treated as 1 x n.
template <class Real>
BasicTensor<Real> add_row(const BasicTensor<Real>& x, const BasicTensor<Real>& bias) {
  detail::require_rank(bias, 1, "add_row");
  const std::size_t n = bias.dim(0);
  detail::require((x.rank() == 2 && x.dim(1) == n) || (x.rank() == 1 && x.dim(0) == n),
                  "add_row: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  const std::size_t m = x.size() / std::max<std::size_t>(n, 1);
  auto out = BasicTensor<Real>::zeros(x.shape());
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) y[r * n + c] = x[r * n + c] + bias[c];
  if (auto* tape = detail::recording_tape({&x, &bias})) {
    detail::record(tape, out, {&x, &bias}, [xn = x.node(), bn = bias.node(), m, n](TensorNode<Real>& o) {
      if (Real* dx = detail::grad_target(xn)) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) dx[i] += o.grad[i];
      }
      if (Real* db = detail::grad_target(bn)) {
        for (std::size_t c = 0; c < n; ++c) {
          double acc = 0.0;
          for (std::size_t r = 0; r < m; ++r) acc += static_cast<double>(o.grad[r * n + c]);
          db[c] += static_cast<Real>(acc);
        }
      }
    });
  }
  return out;
}

/// Sum of all elements, returned as a rank-0 scalar.
template <class Real>
BasicTensor<Real> sum(const BasicTensor<Real>& x) {
  double acc = 0.0;
  for (const Real v : x.data()) acc += static_cast<double>(v);
  auto out = BasicTensor<Real>::scalar(static_cast<Real>(acc));
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, out, {&x}, [xn = x.node()](TensorNode<Real>& o) {
      if (Real* dx = detail::grad_target(xn)) {
        for (std::size_t i = 0; i < xn->data.size(); ++i) dx[i] += o.grad[0];
      }
    });
  }
  return out;
}

template <class Real>
BasicTensor<Real> mean(const BasicTensor<Real>& x) {
  detail::require(x.size() > 0, "mean: empty tensor");
  return scale(sum(x), static_cast<Real>(1.0 / static_cast<double>(x.size())));
}

/// Reduces a matrix along `axis` (0: over rows -> n, 1: over columns -> m).
template <class Real>
BasicTensor<Real> sum(const BasicTensor<Real>& x, std::size_t axis) {
  detail::require_rank(x, 2, "sum(axis)");
  detail::require(axis < 2, "sum: axis out of range");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const std::size_t len = axis == 0 ? n : m;
  auto out = BasicTensor<Real>::zeros({len});
  auto y = out.mutable_data();
  for (std::size_t o = 0; o < len; ++o) {
    double acc = 0.0;
    const std::size_t count = axis == 0 ? m : n;
    for (std::size_t i = 0; i < count; ++i)
      acc += static_cast<double>(axis == 0 ? x[i * n + o] : x[o * n + i]);
    y[o] = static_cast<Real>(acc);
  }
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, out, {&x}, [xn = x.node(), axis, m, n](TensorNode<Real>& o) {
      if (Real* dx = detail::grad_target(xn)) {
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) dx[r * n + c] += o.grad[axis == 0 ? c : r];
      }
    });
  }
  return out;
}

template <class Real>
BasicTensor<Real> mean(const BasicTensor<Real>& x, std::size_t axis) {
  detail::require_rank(x, 2, "mean(axis)");
  const std::size_t count = axis == 0 ? x.dim(0) : x.dim(1);
  detail::require(count > 0, "mean: empty axis");
  return scale(sum(x, axis), static_cast<Real>(1.0 / static_cast<double>(count)));
}

/// Softmax along `axis` of a vector (axis 0) or matrix (axis 0 or 1).
template <class Real>
BasicTensor<Real> softmax(const BasicTensor<Real>& x, std::size_t axis) {
  detail::require(x.rank() == 1 || x.rank() == 2, "softmax: rank must be 1 or 2");
  detail::require(axis < x.rank(), "softmax: axis out of range");
  const std::size_t rows = x.rank() == 1 ? 1 : x.dim(0);
  const std::size_t cols = x.rank() == 1 ? x.dim(0) : x.dim(1);
  const std::size_t len = (x.rank() == 1 || axis == 1) ? cols : rows;
  const std::size_t groups = (x.rank() == 1 || axis == 1) ? rows : cols;
  if (len == 0) throw DomainError("softmax over an empty axis");
  // Element j of group g sits at g*gstride + j*estride.
  const std::size_t gstride = (x.rank() == 1 || axis == 1) ? cols : 1;
  const std::size_t estride = (x.rank() == 1 || axis == 1) ? 1 : cols;
  auto out = BasicTensor<Real>::zeros(x.shape());
  auto y = out.mutable_data();
  for (std::size_t g = 0; g < groups; ++g) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, static_cast<double>(x[g * gstride + j * estride]));
    double total = 0.0;
    std::vector<double> e(len);
    for (std::size_t j = 0; j < len; ++j) {
      e[j] = std::exp(static_cast<double>(x[g * gstride + j * estride]) - mx);
      total += e[j];
    }
    for (std::size_t j = 0; j < len; ++j) y[g * gstride + j * estride] = static_cast<Real>(e[j] / total);
  }
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, out, {&x},
                   [xn = x.node(), groups, len, gstride, estride](TensorNode<Real>& o) {
                     Real* dx = detail::grad_target(xn);
                     if (!dx) return;
                     for (std::size_t g = 0; g < groups; ++g) {
                       double dot = 0.0;
                       for (std::size_t j = 0; j < len; ++j) {
                         const std::size_t i = g * gstride + j * estride;
                         dot += static_cast<double>(o.grad[i]) * static_cast<double>(o.data[i]);
                       }
                       for (std::size_t j = 0; j < len; ++j) {
                         const std::size_t i = g * gstride + j * estride;
                         dx[i] += static_cast<Real>(static_cast<double>(o.data[i]) *
                                                    (static_cast<double>(o.grad[i]) - dot));
                       }
                     }
                   });
  }
  return out;
}

template <class Real>
BasicTensor<Real> reshape(const BasicTensor<Real>& x, Shape shape) {
  detail::require(shape_size(shape) == x.size(),
                  "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  BasicTensor<Real> out(std::move(shape), std::vector<Real>(x.data().begin(), x.data().end()));
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, out, {&x}, [xn = x.node()](TensorNode<Real>& o) {
      if (Real* dx = detail::grad_target(xn)) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) dx[i] += o.grad[i];
      }
    });
  }
  return out;
}

template <class Real>
BasicTensor<Real> transpose(const BasicTensor<Real>& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  BasicTensor<Real> out({n, m}, detail::transpose_data<Real>(x.data(), m, n));
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, out, {&x}, [xn = x.node(), m, n](TensorNode<Real>& o) {
      if (Real* dx = detail::grad_target(xn)) {
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) dx[r * n + c] += o.grad[c * m + r];
      }
    });
  }
  return out;
}

/// Rows of x selected (with repetition allowed) by `rows`.
template <class Real>
BasicTensor<Real> gather_rows(const BasicTensor<Real>& x, std::span<const std::size_t> rows) {
  detail::require_rank(x, 2, "gather_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  for (const auto r : rows) {
    detail::require(r < m, "gather_rows: row " + std::to_string(r) + " out of range " +
                               std::to_string(m));
  }
  auto out = BasicTensor<Real>::zeros({rows.size(), n});
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data().begin() + static_cast<long>(rows[i] * n), n, y.begin() + static_cast<long>(i * n));
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, out, {&x},
                   [xn = x.node(), idx = std::vector<std::size_t>(rows.begin(), rows.end()), n](
                       TensorNode<Real>& o) {
                     if (Real* dx = detail::grad_target(xn)) {
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t c = 0; c < n; ++c) dx[idx[i] * n + c] += o.grad[i * n + c];
                     }
                   });
  }
  return out;
}

/// Stacks matrices with equal column counts on top of each other.
template <class Real>
BasicTensor<Real> concat_rows(const std::vector<BasicTensor<Real>>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t n = parts.front().rank() == 2 ? parts.front().dim(1) : 0;
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.dim(1) == n, "concat_rows: column mismatch at " +
                                                        shape_str(p.shape()));
    m += p.dim(0);
  }
  std::vector<Real> data;
  data.reserve(m * n);
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  BasicTensor<Real> out({m, n}, std::move(data));
  Tape<Real>* tape = Tape<Real>::active();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    out.node()->requires_grad = true;
    out.node()->is_leaf = false;
    std::vector<detail::NodePtr<Real>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto captured = nodes;
    tape->record(out.node(), std::move(nodes), [captured](TensorNode<Real>& o) {
      std::size_t offset = 0;
      for (const auto& pn : captured) {
        if (Real* dp = detail::grad_target(pn)) {
          for (std::size_t i = 0; i < pn->data.size(); ++i) dp[i] += o.grad[offset + i];
        }
        offset += pn->data.size();
      }
    });
  }
  return out;
}

/// Euclidean norm along `axis` of a matrix; the gradient at a zero vector is zero.
template <class Real>
BasicTensor<Real> l2_norm(const BasicTensor<Real>& x, std::size_t axis) {
  detail::require_rank(x, 2, "l2_norm");
  detail::require(axis < 2, "l2_norm: axis out of range");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const std::size_t len = axis == 1 ? m : n;
  auto out = BasicTensor<Real>::zeros({len});
  auto y = out.mutable_data();
  for (std::size_t o = 0; o < len; ++o) {
    double acc = 0.0;
    const std::size_t count = axis == 1 ? n : m;
    for (std::size_t i = 0; i < count; ++i) {
      const double v = axis == 1 ? x[o * n + i] : x[i * n + o];
      acc += v * v;
    }
    y[o] = static_cast<Real>(std::sqrt(acc));
  }
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, out, {&x}, [xn = x.node(), axis, m, n](TensorNode<Real>& o) {
      Real* dx = detail::grad_target(xn);
      if (!dx) return;
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
          const std::size_t k = axis == 1 ? r : c;
          if (o.data[k] > Real{0}) dx[r * n + c] += o.grad[k] * xn->data[r * n + c] / o.data[k];
        }
      }
    });
  }
  return out;
}

/// Divides each row by max(||row||, eps).
template <class Real>
BasicTensor<Real> normalize_rows(const BasicTensor<Real>& x, Real eps) {
  detail::require_rank(x, 2, "normalize_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<Real> norms(m);
  auto out = BasicTensor<Real>::zeros(x.shape());
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < m; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < n; ++c) acc += static_cast<double>(x[r * n + c]) * x[r * n + c];
    const double norm = std::sqrt(acc);
    BranchRecorder::note(norm > eps);
    norms[r] = static_cast<Real>(std::max(norm, static_cast<double>(eps)));
    for (std::size_t c = 0; c < n; ++c) y[r * n + c] = static_cast<Real>(x[r * n + c] / static_cast<double>(norms[r]));
  }
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, out, {&x}, [xn = x.node(), norms, eps, m, n](TensorNode<Real>& o) {
      Real* dx = detail::grad_target(xn);
      if (!dx) return;
      for (std::size_t r = 0; r < m; ++r) {
        const double nr = norms[r];
        if (nr > eps) {
          double dot = 0.0;
          for (std::size_t c = 0; c < n; ++c)
            dot += static_cast<double>(o.data[r * n + c]) * o.grad[r * n + c];
          for (std::size_t c = 0; c < n; ++c)
            dx[r * n + c] += static_cast<Real>((o.grad[r * n + c] - o.data[r * n + c] * dot) / nr);
        } else {
          for (std::size_t c = 0; c < n; ++c) dx[r * n + c] += static_cast<Real>(o.grad[r * n + c] / nr);
        }
      }
    });
  }
  return out;
}

/// Mean over the spatial extent of a C x H x W tensor -> C.
template <class Real>
BasicTensor<Real> global_average_pool(const BasicTensor<Real>& x) {
  detail::require_rank(x, 3, "global_average_pool");
  const std::size_t ch = x.dim(0);
  const std::size_t area = x.dim(1) * x.dim(2);
  detail::require(area > 0, "global_average_pool: empty spatial extent");
  auto out = BasicTensor<Real>::zeros({ch});
  auto y = out.mutable_data();
  for (std::size_t c = 0; c < ch; ++c) {
    double acc = 0.0;
    for (std::size_t p = 0; p < area; ++p) acc += static_cast<double>(x[c * area + p]);
    y[c] = static_cast<Real>(acc / static_cast<double>(area));
  }
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, out, {&x}, [xn = x.node(), ch, area](TensorNode<Real>& o) {
      if (Real* dx = detail::grad_target(xn)) {
        const Real inv = static_cast<Real>(1.0 / static_cast<double>(area));
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t p = 0; p < area; ++p) dx[c * area + p] += o.grad[c] * inv;
      }
    });
  }
  return out;
}

/// Same values, no gradient path back to x.
template <class Real>
BasicTensor<Real> stop_gradient(const BasicTensor<Real>& x) {
  return x.clone(false);
}

/// Element i as a rank-0 scalar.
template <class Real>
BasicTensor<Real> take(const BasicTensor<Real>& x, std::size_t i) {
  detail::require(i < x.size(), "take: index out of range");
  auto out = BasicTensor<Real>::scalar(x[i]);
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, out, {&x}, [xn = x.node(), i](TensorNode<Real>& o) {
      if (Real* dx = detail::grad_target(xn)) dx[i] += o.grad[0];
    });
  }
  return out;
}

/// -log softmax(logits)[label], evaluated through log-sum-exp in f64.
template <class Real>
BasicTensor<Real> cross_entropy(const BasicTensor<Real>& logits, std::size_t label) {
  detail::require_rank(logits, 1, "cross_entropy");
  const std::size_t k = logits.dim(0);
  if (label >= k) {
    throw DomainError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                      std::to_string(k) + ")");
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (const Real v : logits.data()) mx = std::max(mx, static_cast<double>(v));
  // Shifted by the target logit so the one-hot limit keeps full precision.
  const double target = logits[label];
  double rest = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    if (j != label) rest += std::exp(static_cast<double>(logits[j]) - target);
  }
  std::vector<double> probs(k);
  double total = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    probs[j] = std::exp(static_cast<double>(logits[j]) - mx);
    total += probs[j];
  }
  const double loss = target >= mx ? std::log1p(rest) : (mx - target) + std::log(total);
  for (auto& p : probs) p /= total;
  auto out = BasicTensor<Real>::scalar(static_cast<Real>(loss));
  if (auto* tape = detail::recording_tape({&logits})) {
    detail::record(tape, out, {&logits}, [ln = logits.node(), probs, label](TensorNode<Real>& o) {
      if (Real* dl = detail::grad_target(ln)) {
        for (std::size_t j = 0; j < probs.size(); ++j)
          dl[j] += static_cast<Real>(o.grad[0] * (probs[j] - (j == label ? 1.0 : 0.0)));
      }
    });
  }
  return out;
}

}  // namespace ops
}  // namespace lico
