#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "esrs/error.hpp"

namespace esrs {

using Shape = std::vector<std::size_t>;

template <typename T>
concept Scalar = std::same_as<T, float> || std::same_as<T, double>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Precision-dependent constant added to masked logits before softmax.
template <Scalar T>
constexpr T mask_penalty() {
  if constexpr (std::same_as<T, float>) {
    return T(-1e9);
  } else {
    return T(-1e30);
  }
}

namespace detail {

inline thread_local bool grad_enabled = true;

template <Scalar T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the grads of `inputs`.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
};

}  // namespace detail

inline bool grad_mode_enabled() { return detail::grad_enabled; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor. Copies are shallow handles onto shared storage,
/// so a parameter updated in place by an optimizer is seen by every model
/// that holds it.
template <Scalar T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::Node<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(numel(shape), T(0));
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    std::vector<T> v(numel(shape), fill);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw DimensionError("tensor of shape " + shape_str(shape) + " cannot hold " +
                           std::to_string(values.size()) + " values");
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  /// Result of an operation. Records inputs and the backward rule only when
  /// grad mode is on and some input participates in differentiation.
  static Tensor make_result(Shape shape, std::vector<T> values,
                            std::initializer_list<const Tensor*> inputs, const char* op,
                            std::function<void(Node&)> backward) {
    std::vector<const Tensor*> in(inputs);
    return make_result(std::move(shape), std::move(values), in, op, std::move(backward));
  }

  static Tensor make_result(Shape shape, std::vector<T> values,
                            const std::vector<const Tensor*>& inputs, const char* op,
                            std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->op = op;
    if (detail::grad_enabled) {
      const bool any = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor* t) { return t->requires_grad(); });
      if (any) {
        n->requires_grad = true;
        n->inputs.reserve(inputs.size());
        for (const Tensor* t : inputs) n->inputs.push_back(t->node_);
        n->backward = std::move(backward);
      }
    }
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }

  std::span<const T> values() const { return node_->value; }
  /// In-place access for initialization and optimizer updates.
  std::span<T> mutable_values() { return node_->value; }
  const std::vector<T>& vec() const { return node_->value; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }
  void clear_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
  }

  T operator[](std::size_t i) const { return node_->value[i]; }

  /// Value copy with no graph history.
  Tensor detach(bool requires_grad = false) const {
    return from(node_->shape, node_->value, requires_grad);
  }

  const char* op_name() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

template <Scalar T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// Ordered record of the operations reachable from a root, in execution
/// (topological) order. Replaying it in reverse runs backpropagation.
template <Scalar T>
class Tape {
 public:
  using Node = detail::Node<T>;

  static Tape record(const Tensor<T>& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<const Node*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        tape.nodes_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node*>& nodes() const { return nodes_; }

  /// Number of recorded operations (non-leaf nodes).
  std::size_t operation_count() const {
    return static_cast<std::size_t>(
        std::count_if(nodes_.begin(), nodes_.end(), [](const Node* n) { return !n->is_leaf(); }));
  }

  /// Seeds the root gradient with 1 and replays in reverse. Leaf gradients
  /// accumulate across calls; intermediate gradients are reset.
  template <typename Visit>
  void replay(Visit&& on_visit) const {
    for (Node* n : nodes_) {
      if (n->is_leaf()) {
        if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), T(0));
      } else {
        n->grad.assign(n->value.size(), T(0));
      }
    }
    if (nodes_.empty()) return;
    nodes_.back()->grad[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node* n = *it;
      if (!n->is_leaf()) {
        on_visit(*n);
        n->backward(*n);
      }
    }
  }

  void replay() const {
    replay([](Node&) {});
  }

 private:
  std::vector<Node*> nodes_;
};

/// Reverse-mode differentiation from a scalar loss.
template <Scalar T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward on a loss that is not connected to any trainable tensor");
  }
  Tape<T>::record(loss).replay();
}

}  // namespace esrs
