#pragma once

// Minimal reverse-mode differentiation engine.
//
// A BasicTensor is a shared handle onto a node holding row-major data and an
// optional gradient buffer. Operations executed while a Tape is active (see
// TapeScope) and touching at least one grad-requiring input are appended to
// that tape; Tape::backward replays them in reverse order.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lico/errors.hpp"

namespace lico {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool is_leaf = true;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real{0});
  }
};

template <class Real>
class Tape;

template <class Real>
class BasicTensor {
 public:
  using value_type = Real;
  using Node = TensorNode<Real>;

  BasicTensor() : node_(std::make_shared<Node>()) {}

  BasicTensor(Shape shape, std::vector<Real> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape_size(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return BasicTensor(std::move(shape), std::vector<Real>(n, Real{0}), requires_grad);
  }

  static BasicTensor full(Shape shape, Real value, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return BasicTensor(std::move(shape), std::vector<Real>(n, value), requires_grad);
  }

  static BasicTensor scalar(Real value, bool requires_grad = false) {
    return BasicTensor(Shape{}, {value}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const Real> data() const { return node_->data; }
  /// Direct write access; reserved for optimizers and initializers.
  std::span<Real> mutable_data() { return node_->data; }

  Real operator[](std::size_t i) const { return node_->data[i]; }
  Real at(std::size_t r, std::size_t c) const {
    return node_->data[r * node_->shape.at(1) + c];
  }
  Real item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool is_leaf() const { return node_->is_leaf; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy: fresh leaf with the same values, gradient history dropped.
  BasicTensor clone(bool requires_grad) const {
    return BasicTensor(node_->shape, node_->data, requires_grad);
  }

  template <class To>
  BasicTensor<To> cast(bool requires_grad) const {
    return BasicTensor<To>(node_->shape,
                           std::vector<To>(node_->data.begin(), node_->data.end()),
                           requires_grad);
  }

  const std::shared_ptr<Node>& node() const { return node_; }

  bool same_node(const BasicTensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;

/// Ordered record of executed differentiable operations.
template <class Real>
class Tape {
 public:
  using Node = TensorNode<Real>;
  using BackwardFn = std::function<void(Node& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<Node> out, std::vector<std::shared_ptr<Node>> inputs,
              BackwardFn fn) {
    for (const auto& in : inputs) {
      if (in->is_leaf && in->requires_grad) leaves_.insert(in);
    }
    entries_.push_back(Entry{std::move(out), std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }

  void clear() {
    entries_.clear();
    leaves_.clear();
  }

  /// Accumulates d(loss)/d(leaf) into every grad-requiring leaf reached by the
  /// tape. Non-leaf gradients are released afterwards so the same tape can be
  /// replayed for a second loss.
  void backward(const BasicTensor<Real>& loss) {
    if (loss.size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          shape_str(loss.shape()));
    }
    auto& root = *loss.node();
    if (!root.requires_grad) {
      throw ContractError("backward() on a loss that was not recorded on an active tape");
    }
    root.ensure_grad();
    root.grad[0] += Real{1};
    visited_ = 0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      Node& out = *it->out;
      if (out.grad.empty()) continue;
      it->fn(out);
      ++visited_;
    }
    for (auto& e : entries_) {
      if (!e.out->is_leaf) e.out->grad.clear();
    }
    for (const auto& leaf : leaves_) leaf->ensure_grad();
  }

  /// Number of entries whose backward function ran during the last backward().
  std::size_t last_visited() const { return visited_; }

  static Tape* active() { return active_; }

 private:
  template <class>
  friend class TapeScope;

  struct Entry {
    std::shared_ptr<Node> out;
    BackwardFn fn;
  };

  std::vector<Entry> entries_;
  std::unordered_set<std::shared_ptr<Node>> leaves_;
  std::size_t visited_ = 0;

  static inline thread_local Tape* active_ = nullptr;
};

/// Makes a tape the recording target for the current thread while in scope.
/// A null tape suspends recording.
template <class Real>
class TapeScope {
 public:
  explicit TapeScope(Tape<Real>* tape) : previous_(Tape<Real>::active_) {
    Tape<Real>::active_ = tape;
  }
  explicit TapeScope(Tape<Real>& tape) : TapeScope(&tape) {}
  ~TapeScope() { Tape<Real>::active_ = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Real>* previous_;
};

template <class Real>
class NoGradScope : public TapeScope<Real> {
 public:
  NoGradScope() : TapeScope<Real>(nullptr) {}
};

}  // namespace lico
