#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fundus/errors.hpp"
#include "fundus/tensor.hpp"

namespace fundus {

/// Trainable tensor plus its accumulated gradient.
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = true;

  explicit Parameter(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(T{0}); }
};

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

/// Records one forward pass as a topologically ordered list of nodes and
/// replays it in reverse to propagate gradients. Node values are immutable
/// once pushed. One tape per step; a tape is not shared between threads.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;  // empty until something flows into it
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  Var constant(Tensor<T> value) { return push("constant", std::move(value), false, {}); }

  Var parameter(Parameter<T>& p, bool trainable = true) {
    const bool rg = trainable && p.requires_grad;
    Var v = push("parameter", p.value, rg, {});
    if (rg) nodes_[v.id].param = &p;
    return v;
  }

  /// Append an op result. Throws NumericalError on a non-finite value.
  Var push(std::string op, Tensor<T> value, bool requires_grad, BackwardFn fn) {
    if (!value.all_finite()) throw NumericalError("non-finite value produced by op '" + op + "'");
    nodes_.push_back(Node{std::move(op), std::move(value), {}, requires_grad, nullptr, requires_grad ? std::move(fn) : BackwardFn{}});
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw ShapeError("tape: unknown variable");
    return nodes_[v.id];
  }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, allocated as zeros on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  const Tensor<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }
  const Tensor<T>& value_of(std::size_t id) const { return nodes_[id].value; }

  /// Reverse sweep from a scalar loss. Parameter gradients are accumulated
  /// into Parameter::grad; intermediate gradients are released on the way.
  void backward(Var loss) {
    if (nodes_.empty() || loss.id >= nodes_.size()) throw ShapeError("backward: no recorded forward pass");
    if (nodes_[loss.id].value.size() != 1) throw ShapeError("backward: loss must be a scalar");
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id).fill(T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (n.param) {
        if (!n.grad.all_finite()) throw NumericalError("non-finite gradient for a parameter");
        n.param->grad += n.grad;
      } else if (n.backward) {
        n.backward(*this, i);
      }
      n.grad = Tensor<T>{};
    }
  }

 private:
  std::vector<Node> nodes_;
};

}  // namespace fundus
