#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace quickdrop {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A non-finite value appeared where the engine requires finite numbers.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the differentiation graph (released graph, missing requires_grad).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <std::floating_point T>
class Tensor;

namespace detail {

inline thread_local bool grad_enabled = true;

template <std::floating_point T>
struct Node {
  using BackwardFn = std::function<std::vector<Tensor<T>>(
      const Tensor<T>& upstream, const std::vector<bool>& needs)>;

  Shape shape;
  std::vector<T> values;
  bool requires_grad = false;
  bool leaf = true;
  // Set once a backward pass without retention has run through this node.
  bool released = false;
  // Derived from a gradient computed without graph construction.
  bool graph_free = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

template <class T>
void check_finite(std::span<const T> values, const char* op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string("non-finite value produced by '") + op +
                         "' at flat index " + std::to_string(i));
    }
  }
}

}  // namespace detail

/// RAII switch for graph recording on the current thread.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : previous_(detail::grad_enabled) {
    detail::grad_enabled = enabled;
  }
  ~GradModeGuard() { detail::grad_enabled = previous_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

struct NoGradGuard : GradModeGuard {
  NoGradGuard() : GradModeGuard(false) {}
};

inline bool grad_mode_enabled() { return detail::grad_enabled; }

/// Dense row-major tensor participating in a reverse-mode graph.
///
/// Copies share the underlying node, like a handle. Values are immutable
/// once the tensor has been used as an operation input; create a new leaf
/// instead of writing into an existing one.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from_values(Shape shape, std::vector<T> values,
                            bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    detail::check_finite<T>(values, "from_values");
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> values(shape_numel(shape), value);
    return from_values(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_values({}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->values.size(); }
  std::span<const T> values() const { return node_->values; }
  const std::vector<T>& vector() const { return node_->values; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->values[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool graph_free() const { return node_->graph_free; }
  const char* op() const { return node_->op; }

  /// Fresh leaf holding a copy of the values, with no history.
  Tensor detach(bool requires_grad = false) const {
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = node_->shape;
    node->values = node_->values;
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

/// Builds the output of a differentiable operation. The backward closure is
/// only stored when recording is enabled and some input requires a gradient.
template <std::floating_point T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> values,
                  std::vector<Tensor<T>> inputs,
                  typename Node<T>::BackwardFn backward) {
  check_finite<T>(values, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  bool any_requires = false;
  for (const auto& in : inputs) {
    any_requires = any_requires || in.requires_grad();
    node->graph_free = node->graph_free || in.graph_free();
  }
  if (grad_enabled && any_requires) {
    node->requires_grad = true;
    node->leaf = false;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

}  // namespace quickdrop
