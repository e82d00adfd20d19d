#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "moenet/common.hpp"

namespace moenet {

// Dense 4-D shape (batch, channels, height, width). Vectors and scalars are
// represented with trailing singleton dims, e.g. per-input expert logits are
// (B, N, 1, 1) and a loss is (1, 1, 1, 1).
struct Shape {
  int n = 1, c = 1, h = 1, w = 1;

  Shape() = default;
  Shape(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {}

  long numel() const { return static_cast<long>(n) * c * h * w; }
  long index(int in, int ic, int ih, int iw) const {
    return ((static_cast<long>(in) * c + ic) * h + ih) * w + iw;
  }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return strcat_msg("(", n, ",", c, ",", h, ",", w, ")");
  }
};

namespace detail {
inline std::atomic<uint64_t>& node_seq_counter() {
  static std::atomic<uint64_t> counter{0};
  return counter;
}
}  // namespace detail

// One vertex of the computation graph. Ops allocate a node, fill `val`, and
// install a backward function that reads this node's grad and accumulates
// into the parents' grads. Nodes own their parents, so holding the root of a
// graph keeps the whole graph alive.
template <typename T>
struct TensorNode {
  Shape shape;
  ValueBuffer<T> val;
  ValueBuffer<T> grad;  // allocated lazily, same length as val
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;
  const char* tag = "leaf";
  uint64_t seq = detail::node_seq_counter()++;

  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& s, bool requires_grad = false) {
    return filled(s, T(0), requires_grad);
  }

  static Tensor filled(const Shape& s, T v, bool requires_grad = false) {
    auto node = std::make_shared<Node>();
    node->shape = s;
    node->val.assign(static_cast<size_t>(s.numel()), v);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from_values(const Shape& s, std::vector<T> vals,
                            bool requires_grad = false) {
    if (static_cast<long>(vals.size()) != s.numel())
      throw std::invalid_argument(strcat_msg(
          "tensor value count ", vals.size(), " does not match shape ", s.str()));
    auto node = std::make_shared<Node>();
    node->shape = s;
    node->val.assign(vals.begin(), vals.end());
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  long numel() const { return node_->shape.numel(); }

  std::span<const T> values() const { return node_->val; }
  // Direct mutation is reserved for leaves (parameter updates, attack
  // iterates); op outputs are treated as immutable.
  std::span<T> mutable_values() { return node_->val; }

  T at(int n, int c, int h, int w) const {
    return node_->val[static_cast<size_t>(node_->shape.index(n, c, h, w))];
  }

  T item() const {
    if (numel() != 1)
      throw std::invalid_argument(
          strcat_msg("item() on non-scalar tensor of shape ", shape().str()));
    return node_->val[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) {
    if (!node_->is_leaf)
      throw std::invalid_argument("requires_grad can only be toggled on leaves");
    node_->requires_grad = rg;
  }

  bool has_grad() const { return node_->grad.size() == node_->val.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  bool all_finite() const {
    for (T v : node_->val)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Detached copy of the values as a fresh leaf.
  Tensor detach_copy(bool requires_grad = false) const {
    return from_values(shape(),
                       std::vector<T>(node_->val.begin(), node_->val.end()),
                       requires_grad);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(node_->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(node_->val[i]);
    return Tensor<U>::from_values(shape(), std::move(v), false);
  }

  // Reverse-mode sweep from a scalar root. Accumulates into the grads of all
  // reachable nodes that require grad.
  void backward() {
    if (numel() != 1)
      throw std::invalid_argument("backward() requires a scalar root");
    if (!node_->requires_grad)
      throw std::invalid_argument("backward() on a tensor that requires no grad");

    std::vector<Node*> order = topo_order();
    node_->ensure_grad();
    node_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn && n->requires_grad) n->backward_fn(*n);
    }
  }

  std::shared_ptr<Node>& node() { return node_; }
  const std::shared_ptr<Node>& node() const { return node_; }

  // Scans the graph in construction order for the first node holding a
  // non-finite value; used for failure diagnostics.
  std::string first_nonfinite_tag() const {
    std::vector<Node*> order = topo_order();
    Node* worst = nullptr;
    for (Node* n : order) {
      bool bad = false;
      for (T v : n->val)
        if (!std::isfinite(static_cast<double>(v))) { bad = true; break; }
      if (bad && (worst == nullptr || n->seq < worst->seq)) worst = n;
    }
    if (!worst) return "";
    return strcat_msg(worst->tag, " (node #", worst->seq, ", shape ",
                      worst->shape.str(), ")");
  }

 private:
  std::vector<Node*> topo_order() const {
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    // Iterative postorder DFS; graphs are DAGs by construction.
    struct Frame { Node* node; size_t next_parent; };
    std::vector<Frame> stack;
    stack.push_back({node_.get(), 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        Node* p = f.node->parents[f.next_parent++].get();
        if (visited.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

// Common op-node construction: output shape, parent wiring, grad flags.
// The value buffer is default-initialized; every op fully overwrites it
// (scatter-style ops zero explicitly).
template <typename T>
std::shared_ptr<TensorNode<T>> make_op_node(
    const Shape& s, std::vector<Tensor<T>> parents, const char* tag) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = s;
  node->val.resize(static_cast<size_t>(s.numel()));
  node->is_leaf = false;
  node->tag = tag;
  bool rg = false;
  node->parents.reserve(parents.size());
  for (auto& p : parents) {
    rg = rg || p.node()->requires_grad;
    node->parents.push_back(p.node());
  }
  node->requires_grad = rg;
  return node;
}

template <typename T>
void accumulate_ready(TensorNode<T>& parent) {
  parent.ensure_grad();
}

}  // namespace detail

}  // namespace moenet
