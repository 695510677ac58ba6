#ifndef VSEG_TENSOR_HPP
#define VSEG_TENSOR_HPP

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vseg/common.hpp"

namespace vseg {

template <typename T>
class Tensor;

namespace detail {

// One node of the reverse-mode graph. A node owns the value it produced,
// references the nodes it was computed from, and (when gradients are
// required) a closure that scatters its own gradient into the parents.
template <typename T>
struct Node {
  const char* op = "leaf";
  std::string name;  // parameter name or empty
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until backward touches this node
  bool needs_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;

  Node(const char* o, Shape s) : op(o), shape(std::move(s)) {
    value.resize(static_cast<size_t>(numel(shape)), T(0));
    AllocStats::add(static_cast<int64_t>(value.size() * sizeof(T)));
  }
  ~Node() { AllocStats::sub(static_cast<int64_t>((value.size() + grad.size()) * sizeof(T))); }
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  int64_t size() const { return static_cast<int64_t>(value.size()); }

  void ensure_grad() {
    if (grad.empty()) {
      grad.assign(value.size(), T(0));
      AllocStats::add(static_cast<int64_t>(grad.size() * sizeof(T)));
    }
  }
};

template <typename T>
std::shared_ptr<Node<T>> make_node(const char* op, Shape shape) {
  return std::make_shared<Node<T>>(op, std::move(shape));
}

}  // namespace detail

/// Dense row-major tensor with optional reverse-mode gradient linkage.
/// Value semantics: copying a Tensor copies a handle to the same immutable
/// node. Only leaves (parameters, inputs) should be mutated, and only
/// between graph builds.
template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape) { return Tensor(detail::make_node<T>("leaf", std::move(shape))); }

  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    for (auto& e : t.n_->value) e = v;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data) {
    if (static_cast<int64_t>(data.size()) != numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    Tensor t = zeros(std::move(shape));
    t.n_->value = std::move(data);
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int64_t dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return n_->size(); }

  const std::vector<T>& values() const { return n_->value; }
  const T* data() const { return n_->value.data(); }

  /// Mutable access for leaves (initialization, optimizer updates).
  std::vector<T>& mutable_values() { return n_->value; }

  T scalar() const {
    if (size() != 1) throw ShapeError("scalar() on tensor of shape " + shape_str(shape()));
    return n_->value[0];
  }

  bool requires_grad() const { return n_->needs_grad; }
  Tensor& set_requires_grad(bool b) {
    n_->needs_grad = b;
    return *this;
  }

  Tensor& set_name(std::string name) {
    n_->name = std::move(name);
    return *this;
  }
  const std::string& name() const { return n_->name; }

  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (n_->grad.empty()) throw Error("tensor has no gradient (backward not run or not reached)");
    return n_->grad;
  }
  std::vector<T>& mutable_grad() { return n_->grad; }

  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  const std::shared_ptr<Node>& node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {
inline bool& grad_enabled() {
  static thread_local bool on = true;
  return on;
}
}  // namespace detail

/// Scoped switch that stops ops from recording backprop closures
/// (inference paths).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_enabled()) { detail::grad_enabled() = false; }
  ~NoGradGuard() { detail::grad_enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---------------------------------------------------------------------------
// backward: reverse-mode sweep over the implicit DAG rooted at `out`.
// ---------------------------------------------------------------------------

namespace detail {

// Post-order over grad-requiring nodes; iterative to survive deep graphs.
template <typename T>
void topo_order(Node<T>* root, std::vector<Node<T>*>& order) {
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->needs_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

/// Accumulates d(sum(out * seed))/d(leaf) into every grad-requiring leaf
/// reachable from `out`. Gradients sum over fan-out.
template <typename T>
void backward(const Tensor<T>& out, const Tensor<T>& seed) {
  if (out.shape() != seed.shape())
    throw ShapeError("backward seed shape " + shape_str(seed.shape()) + " does not match output shape " +
                     shape_str(out.shape()));
  if (!out.requires_grad()) return;

  std::vector<detail::Node<T>*> order;
  detail::topo_order(out.node().get(), order);

  out.node()->ensure_grad();
  {
    auto& g = out.node()->grad;
    const auto& s = seed.values();
    for (size_t i = 0; i < g.size(); ++i) g[i] += s[i];
  }
  // Post-order list ends at the root; walk it backwards.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

template <typename T>
void backward(const Tensor<T>& out) {
  backward(out, Tensor<T>::full(out.shape(), T(1)));
}

}  // namespace vseg

#endif  // VSEG_TENSOR_HPP
