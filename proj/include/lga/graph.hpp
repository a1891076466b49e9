#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "lga/tensor.hpp"

namespace lga {

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const { return graph_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  const Tensor<T>& grad() const { return graph_->grad(*this); }
  bool requires_grad() const { return graph_->requires_grad(*this); }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only reverse-mode tape. Inputs of a node always carry smaller ids,
/// so a single reverse sweep over ids visits nodes in topological order.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}, {}); }
  Var<T> parameter(Tensor<T> value) { return push(std::move(value), true, {}, {}); }

  /// Records an op result. The backward closure runs only if some input
  /// requires a gradient.
  Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward, std::string tag) {
    bool needs = false;
    for (auto in : inputs) needs = needs || nodes_.at(in).requires_grad;
    if (!needs) return push(std::move(value), false, {}, std::move(tag));
    Var<T> v = push(std::move(value), true, std::move(inputs), std::move(tag));
    nodes_.back().backward = std::move(backward);
    return v;
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id()).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  const std::string& tag(std::size_t id) const { return nodes_.at(id).tag; }
  std::size_t size() const noexcept { return nodes_.size(); }

  bool has_grad(Var<T> v) const { return !nodes_.at(v.id()).grad.empty(); }

  /// Gradient of the last backward pass; zeros if the node was unreachable.
  const Tensor<T>& grad(Var<T> v) {
    Node& n = nodes_.at(v.id());
    if (n.grad.empty()) n.grad.push_back(Tensor<T>(n.value.shape()));
    return n.grad.front();
  }

  /// Accumulation buffer for node `id`, allocated on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad.push_back(Tensor<T>(n.value.shape()));
    return n.grad.front();
  }

  void backward(Var<T> loss) {
    if (&loss.graph() != this) throw ContractError("backward: loss belongs to a different graph");
    const Tensor<T>& lv = value(loss);
    if (lv.size() != 1) throw ContractError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
    for (auto& n : nodes_) n.grad.clear();
    grad_buffer(loss.id())[0] = T(1);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::string tag;
    std::vector<Tensor<T>> grad;  // empty until touched
  };

  Var<T> push(Tensor<T> value, bool requires_grad, std::vector<std::size_t> inputs, std::string tag) {
    for (auto in : inputs) {
      if (in >= nodes_.size()) throw ContractError("graph input id out of range");
    }
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(inputs), {}, std::move(tag), {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

}  // namespace lga
