#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nlden/tensor.hpp"

namespace nlden {

// One value in a define-by-run graph. The graph is rebuilt on every forward
// pass and dropped after backward.
template <class T>
struct Node {
  BasicTensor<T> value;
  std::string op_tag;
  std::vector<std::shared_ptr<Node>> parents;
  std::optional<BasicTensor<T>> grad;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;
  std::string name;  // non-empty for named leaves (parameters)
  bool requires_grad = false;

  // Adds g into grad, allocating on first use.
  void accumulate(const BasicTensor<T>& g) {
    if (g.shape() != value.shape())
      throw DimensionError("gradient shape " + shape_str(g.shape()) + " != value shape " + shape_str(value.shape()) +
                           " at " + op_tag);
    if (!grad) {
      grad = g;
      return;
    }
    auto d = grad->data();
    auto s = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  }

  // Mutable view of grad, zero-initialized on first use.
  BasicTensor<T>& grad_buffer() {
    if (!grad) grad = BasicTensor<T>(value.shape());
    return *grad;
  }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> constant(BasicTensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  n->op_tag = "constant";
  return n;
}

template <class T>
Var<T> leaf(BasicTensor<T> v, std::string name = {}) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  n->op_tag = "leaf";
  n->name = std::move(name);
  n->requires_grad = true;
  return n;
}

// Builds an interior node. Output values must be finite.
template <class T>
Var<T> make_node(BasicTensor<T> value, std::string tag, std::vector<Var<T>> parents,
                 std::function<void(Node<T>&)> bw) {
  if (!value.all_finite()) throw NumericError("non-finite output from " + tag);
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op_tag = std::move(tag);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  n->parents = std::move(parents);
  if (n->requires_grad) n->backward_fn = std::move(bw);
  return n;
}

template <class T>
using Gradients = std::map<std::string, BasicTensor<T>>;

// Reverse-topological order of the nodes reachable from root (root first).
template <class T>
std::vector<Node<T>*> reverse_topological(Node<T>* root) {
  enum class Mark : unsigned char { visiting, done };
  std::unordered_map<Node<T>*, Mark> marks;
  std::vector<Node<T>*> post;
  // Iterative DFS; the stack holds (node, next parent index).
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  marks[root] = Mark::visiting;
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (!p->requires_grad) continue;
      auto it = marks.find(p);
      if (it == marks.end()) {
        marks[p] = Mark::visiting;
        stack.emplace_back(p, 0);
      } else if (it->second == Mark::visiting) {
        throw GraphError("cycle detected at node '" + p->op_tag + "'");
      }
    } else {
      marks[node] = Mark::done;
      post.push_back(node);
      stack.pop_back();
    }
  }
  return {post.rbegin(), post.rend()};
}

// Reverse-mode sweep from a scalar root. Returns gradients of every named
// leaf reached from root.
template <class T>
Gradients<T> backward(const Var<T>& root) {
  if (root->value.size() != 1)
    throw ContractError("backward needs a scalar root, got shape " + shape_str(root->value.shape()));
  Gradients<T> out;
  if (!root->requires_grad) return out;
  auto order = reverse_topological(root.get());
  for (Node<T>* n : order) n->grad.reset();
  root->grad = BasicTensor<T>(root->value.shape(), T(1));
  for (Node<T>* n : order) {
    if (!n->grad) continue;
    if (n->backward_fn) n->backward_fn(*n);
    if (!n->name.empty()) out.insert_or_assign(n->name, *n->grad);
  }
  return out;
}

// Named parameter tensors, ordered by name.
template <class T>
using ParamMap = std::map<std::string, BasicTensor<T>>;

template <class U, class T>
ParamMap<U> cast_params(const ParamMap<T>& p) {
  ParamMap<U> out;
  for (const auto& [k, v] : p) out.emplace(k, v.template cast<U>());
  return out;
}

// Creates (once) the graph leaf for each parameter a forward pass touches.
template <class T>
class Binding {
 public:
  explicit Binding(const ParamMap<T>& params) : params_(&params) {}

  const Var<T>& operator()(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    auto p = params_->find(name);
    if (p == params_->end()) throw ConfigError("missing parameter '" + name + "'");
    return leaves_.emplace(name, leaf(p->second, name)).first->second;
  }

  const BasicTensor<T>& value(const std::string& name) const {
    auto p = params_->find(name);
    if (p == params_->end()) throw ConfigError("missing parameter '" + name + "'");
    return p->second;
  }

  bool has(const std::string& name) const { return params_->count(name) != 0; }

  // backward() plus zero gradients for every parameter the root does not reach.
  Gradients<T> backward(const Var<T>& root) const {
    auto g = nlden::backward(root);
    for (const auto& [name, v] : *params_)
      if (!g.count(name)) g.emplace(name, BasicTensor<T>(v.shape()));
    return g;
  }

 private:
  const ParamMap<T>* params_;
  std::map<std::string, Var<T>> leaves_;
};

}  // namespace nlden
