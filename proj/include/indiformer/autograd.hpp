#pragma once

#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "indiformer/tensor.hpp"

namespace indiformer {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows in
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  /// Gradient buffer, zero-allocated on first use.
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }

  // Helpers for backward closures: only inputs that need a gradient get one.
  bool wants(std::size_t i) const { return inputs[i]->requires_grad; }
  Tensor<T>& input_grad(std::size_t i) { return inputs[i]->grad_buffer(); }
  const Tensor<T>& input_value(std::size_t i) const { return inputs[i]->value; }
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_mode_enabled() { return detail::grad_enabled; }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Handle to a node of the computation graph. Cheap to copy (shared node).
template <typename T>
class Var {
 public:
  using Backward = std::function<void(Node<T>&)>;

  Var() = default;

  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  /// Result of op `name`. Non-finite values raise NumericError. The backward
  /// closure is recorded only when grad mode is on and some input needs a
  /// gradient.
  static Var result(std::string_view name, Tensor<T> value,
                    std::vector<Var> inputs, Backward backward) {
    value.check_finite(name);
    Var out(std::move(value));
    if (!grad_mode_enabled()) return out;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return out;
    out.node_->requires_grad = true;
    out.node_->backward = std::move(backward);
    out.node_->inputs.reserve(inputs.size());
    for (auto& in : inputs) out.node_->inputs.push_back(std::move(in.node_));
    return out;
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
  Node<T>* node() const { return node_.get(); }

  /// Reverse sweep from a scalar output.
  void backward() {
    if (value().size() != 1) {
      throw DimensionError("backward() without seed requires a scalar, got " +
                           shape_string(shape()));
    }
    backward(Tensor<T>(shape(), T{1}));
  }

  void backward(const Tensor<T>& seed) {
    seed.require_same_shape(value(), "backward seed");
    if (!requires_grad()) return;
    std::vector<Node<T>*> order = topological_order();
    node_->grad_buffer() += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>& n = **it;
      if (n.backward && !n.grad.empty()) n.backward(n);
    }
  }

 private:
  // Post-order DFS; iterative so long graphs cannot overflow the stack.
  std::vector<Node<T>*> topological_order() const {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->inputs.size()) {
        Node<T>* child = n->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node<T>> node_;
};

/// A named trainable leaf. Copies are deep (fresh graph node, copied values).
template <typename T>
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor<T> value)
      : name_(std::move(name)), var_(std::move(value), true) {
    var_.grad_buffer();
  }
  Parameter(const Parameter& other)
      : name_(other.name_), var_(other.var_.value(), true) {
    var_.grad_buffer();
  }
  Parameter& operator=(const Parameter& other) {
    if (this != &other) {
      name_ = other.name_;
      var_ = Var<T>(other.var_.value(), true);
      var_.grad_buffer();
    }
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  const std::string& name() const { return name_; }
  const Var<T>& var() const { return var_; }
  Tensor<T>& tensor() { return var_.mutable_value(); }
  const Tensor<T>& tensor() const { return var_.value(); }
  Tensor<T>& gradient() { return var_.grad_buffer(); }
  const Shape& shape() const { return var_.shape(); }
  void zero_grad() { var_.grad_buffer().fill(T{0}); }

 private:
  std::string name_;
  Var<T> var_;
};

template <typename T>
using ParameterList = std::vector<Parameter<T>*>;

/// Throws ConfigError if two parameters share a name.
template <typename T>
void require_unique_names(const ParameterList<T>& params) {
  std::unordered_set<std::string> names;
  for (const auto* p : params) {
    if (!names.insert(p->name()).second) {
      throw ConfigError("duplicate parameter name: " + p->name());
    }
  }
}

template <typename T>
std::size_t count_scalars(const ParameterList<T>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->tensor().size();
  return n;
}

}  // namespace indiformer
