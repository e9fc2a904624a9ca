#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <vector>

#include "tsprobe/tensor.hpp"

namespace tsprobe {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode recording. Every op appends one node whose inputs are strictly
/// older nodes, so node order is a topological order and cycles cannot form.
/// Backward replays nodes newest to oldest, which fixes the accumulation order
/// for a given graph.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad && grad_enabled_, nullptr});
    return {this, nodes_.size() - 1};
  }
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends the result of an op. The closure is kept only if some input needs a gradient.
  Var<T> push(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    if (grad_enabled_) {
      for (const auto& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : nullptr});
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward() target with respect to v (zeros if untouched).
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return Tensor<T>(n.value.shape(), n.grad);
  }

  /// Upstream gradient of node `id`; only valid inside a backward closure.
  const std::vector<T>& out_grad(std::size_t id) const { return nodes_[id].grad; }

  /// Accumulation buffer for an input, allocated as zeros on first touch.
  /// Returns nullptr when that input does not need a gradient.
  T* accum(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad.data();
  }

  void backward(Var<T> loss) {
    if (value(loss).size() != 1) {
      throw DimensionError("backward() needs a scalar loss, got " + shape_str(value(loss).shape()));
    }
    for (auto& n : nodes_) n.grad.clear();
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad.assign(1, T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

}  // namespace tsprobe
