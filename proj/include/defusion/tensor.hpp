#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "defusion/common.hpp"
#include "defusion/rng.hpp"

namespace defusion {

/// Dense tensor node in a reverse-mode autodiff graph.
///
/// Nodes hold their forward value, an optional gradient accumulator of the
/// same shape, and the provenance needed for the backward traversal (parent
/// nodes plus a closure that scatters this node's gradient into the parents).
/// Children own their parents through shared_ptr; the graph is acyclic, so a
/// finished step releases all interior nodes once the loss handle goes out of
/// scope. Leaf parameters survive because the model keeps handles to them.
template <class Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until first needed
  bool requires_grad = false;
  bool backward_done = false;
  const char* op_name = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), Real(0));
  }
};

/// Value-semantic handle to a TensorNode. Copies share the node.
template <class Real>
class Tensor {
 public:
  using Node = TensorNode<Real>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor from_data(Shape shape, std::vector<Real> data,
                          bool requires_grad = false) {
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw ShapeError(strcat_msg("tensor: shape ", shape_str(shape),
                                  " does not match data length ",
                                  data.size()));
    }
    for (int d : shape) {
      if (d <= 0)
        throw ShapeError(
            strcat_msg("tensor: non-positive extent in ", shape_str(shape)));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    if (requires_grad) node->ensure_grad();
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<Real> data(static_cast<size_t>(numel(shape)), Real(0));
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor full(Shape shape, Real value, bool requires_grad = false) {
    std::vector<Real> data(static_cast<size_t>(numel(shape)), value);
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(Real value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  /// Trainable leaf with normal(0, stddev) entries.
  static Tensor randn_param(Shape shape, Rng& rng, Real stddev) {
    std::vector<Real> data(static_cast<size_t>(numel(shape)));
    for (auto& v : data) v = static_cast<Real>(rng.normal(0.0, stddev));
    return from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->data.size()); }
  std::vector<Real>& data() { return node_->data; }
  const std::vector<Real>& data() const { return node_->data; }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op_name() const { return node_->op_name; }

  std::vector<Real>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<Real>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  void zero_grad() {
    node_->grad.assign(node_->data.size(), Real(0));
  }

  Real item() const {
    if (node_->data.size() != 1)
      throw ShapeError(strcat_msg("item: tensor has ", node_->data.size(),
                                  " elements, expected 1"));
    return node_->data[0];
  }

  std::shared_ptr<Node> node() const { return node_; }

  /// Clears the consumed-backward flag so the same graph may be traversed
  /// again (gradients then accumulate on top of existing values).
  void reset_backward() {
    if (node_) node_->backward_done = false;
  }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

/// Post-order DFS over parents; the visit order is fully determined by the
/// graph construction order, which keeps gradient accumulation deterministic.
template <class Real>
std::vector<TensorNode<Real>*> topo_order(TensorNode<Real>* root) {
  std::vector<TensorNode<Real>*> order;
  std::unordered_set<TensorNode<Real>*> visited;
  std::vector<std::pair<TensorNode<Real>*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next_parent] = stack.back();
    if (next_parent < node->parents.size()) {
      TensorNode<Real>* parent = node->parents[next_parent].get();
      ++next_parent;
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Every reachable node that requires
/// a gradient is visited exactly once, in reverse topological order.
template <class Real>
void backward(const Tensor<Real>& loss) {
  auto* root = loss.node().get();
  if (root == nullptr) throw ValueError("backward: undefined tensor");
  if (root->data.size() != 1)
    throw ShapeError(strcat_msg("backward: loss must be scalar, got shape ",
                                shape_str(root->shape)));
  if (root->backward_done)
    throw ValueError("backward: loss already traversed; reset before reuse");
  if (!root->requires_grad) {
    root->backward_done = true;
    return;  // constant loss: nothing depends on parameters
  }

  auto order = detail::topo_order(root);
  for (auto* node : order) node->ensure_grad();
  root->grad.assign(root->data.size(), Real(0));
  root->grad[0] = Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<Real>* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
  root->backward_done = true;
}

}  // namespace defusion
