#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lpa/errors.hpp"

namespace lpa {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// One recorded operation. Creation order of reachable nodes is the tape;
// backward() replays it in reverse topological order.
template <typename T>
struct Node {
  static_assert(std::is_floating_point_v<T>);

  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // persistent, sized on first backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;

  // Adds this node's adjoint contribution into the parents' pass-local
  // buffers. parent_adj[i] is null when parent i does not need gradients.
  std::function<void(const std::vector<T>& adj, const std::vector<std::vector<T>*>& parent_adj)>
      backward;
};

template <typename T>
class Tensor {
 public:
  using BackwardFn =
      std::function<void(const std::vector<T>&, const std::vector<std::vector<T>*>&)>;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(static_cast<std::size_t>(numel(shape)), T(0));
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T v) {
    auto t = zeros(std::move(shape));
    for (T& x : t.n_->value) x = v;
    return t;
  }

  static Tensor scalar(T v) { return full({}, v); }

  static Tensor from(Shape shape, std::vector<T> data) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  // Builds an op node. The result requires gradients iff any parent does;
  // otherwise parents and the backward closure are dropped so constant
  // subgraphs do not grow the tape.
  static Tensor op(Shape shape, std::vector<T> value, std::vector<Tensor> parents,
                   BackwardFn backward_fn) {
    if (static_cast<std::int64_t>(value.size()) != numel(shape)) {
      throw DimensionError("op output length " + std::to_string(value.size()) +
                           " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool needs = false;
    for (const Tensor& p : parents) needs = needs || p.requires_grad();
    if (needs) {
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (Tensor& p : parents) n->parents.push_back(p.n_);
      n->backward = std::move(backward_fn);
    }
    return Tensor(std::move(n));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(n_->value.size()); }

  std::vector<T>& data() { return n_->value; }
  const std::vector<T>& value() const { return n_->value; }
  const std::vector<T>& grad() const { return n_->grad; }

  bool requires_grad() const { return n_ && n_->requires_grad; }

  Tensor& set_requires_grad(bool b = true) {
    if (b && n_->backward) throw UsageError("requires_grad can only be toggled on leaf tensors");
    n_->requires_grad = b;
    return *this;
  }

  T item() const {
    if (size() != 1) throw UsageError("item() requires a scalar tensor, got " + shape_str(shape()));
    return n_->value[0];
  }

  T at(std::initializer_list<int> idx) const { return n_->value[flat_index(idx)]; }
  T grad_at(std::initializer_list<int> idx) const { return n_->grad[flat_index(idx)]; }

  void zero_grad() {
    if (n_) n_->grad.assign(n_->value.size(), T(0));
  }

  std::shared_ptr<Node<T>> node() const { return n_; }

 private:
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  std::size_t flat_index(std::initializer_list<int> idx) const {
    const Shape& s = n_->shape;
    if (idx.size() != s.size()) {
      throw UsageError("index rank " + std::to_string(idx.size()) + " vs tensor rank " +
                       std::to_string(s.size()));
    }
    std::size_t flat = 0;
    std::size_t k = 0;
    for (int i : idx) {
      if (i < 0 || i >= s[k]) throw UsageError("index out of range");
      flat = flat * static_cast<std::size_t>(s[k]) + static_cast<std::size_t>(i);
      ++k;
    }
    return flat;
  }

  std::shared_ptr<Node<T>> n_;
};

// Reverse-mode sweep from a scalar root. Adjoints are accumulated in
// pass-local buffers and only added into persistent .grad at the end, so
// running backward twice without reset doubles every gradient exactly.
template <typename T>
void backward(const Tensor<T>& root) {
  if (!root.defined() || root.size() != 1) {
    throw UsageError("backward requires a scalar root, got " +
                     (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  }
  Node<T>* rn = root.node().get();
  if (!rn->requires_grad) return;

  // Iterative postorder DFS over the requires_grad subgraph.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  visited.insert(rn);
  stack.emplace_back(rn, 0);
  while (!stack.empty()) {
    auto& top = stack.back();
    Node<T>* node = top.first;
    bool descended = false;
    while (top.second < node->parents.size()) {
      Node<T>* p = node->parents[top.second].get();
      ++top.second;
      if (p->requires_grad && visited.insert(p).second) {
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (!descended) {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<Node<T>*, std::vector<T>> adj;
  adj[rn] = {T(1)};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    auto found = adj.find(node);
    if (found == adj.end()) continue;
    std::vector<T>& a = found->second;
    if (node->backward) {
      std::vector<std::vector<T>*> parent_adj(node->parents.size(), nullptr);
      for (std::size_t i = 0; i < node->parents.size(); ++i) {
        Node<T>* p = node->parents[i].get();
        if (!p->requires_grad) continue;
        std::vector<T>& buf = adj[p];
        if (buf.size() != p->value.size()) buf.assign(p->value.size(), T(0));
        parent_adj[i] = &buf;
      }
      node->backward(a, parent_adj);
    }
    if (node->grad.size() != node->value.size()) node->grad.assign(node->value.size(), T(0));
    for (std::size_t i = 0; i < a.size(); ++i) node->grad[i] += a[i];
  }
}

}  // namespace lpa
