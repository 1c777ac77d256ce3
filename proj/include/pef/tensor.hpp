#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace pef {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

struct ValueError : std::runtime_error {
  explicit ValueError(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape");
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

// One node of the define-by-run graph. The graph is rebuilt on every
// forward pass; backward() walks it in reverse topological order.
template <class Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // sized lazily, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backprop;  // accumulates into inputs' grads

  std::vector<Real>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
    return grad;
  }
};

// Value-semantic handle to a graph node. Copies share storage.
template <class Real>
class Tensor {
 public:
  using Node = TensorNode<Real>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false) {
    if (numel(shape) != data.size())
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    n_ = std::make_shared<Node>();
    n_->shape = std::move(shape);
    n_->value = std::move(data);
    n_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<Real> d(numel(shape), Real(0));
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, Real v, bool requires_grad = false) {
    std::vector<Real> d(numel(shape), v);
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(Real v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  template <class Rng>
  static Tensor randn(Shape shape, Rng& rng, Real stddev = Real(1),
                      bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<Real> d(numel(shape));
    for (auto& x : d) x = static_cast<Real>(dist(rng)) * stddev;
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  template <class Rng>
  static Tensor uniform(Shape shape, Rng& rng, Real lo, Real hi,
                        bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<Real> d(numel(shape));
    for (auto& x : d) x = static_cast<Real>(dist(rng));
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  std::size_t size() const { return n_->value.size(); }

  std::vector<Real>& data() { return n_->value; }
  const std::vector<Real>& data() const { return n_->value; }
  Real& at(std::size_t i) { return n_->value[i]; }
  Real at(std::size_t i) const { return n_->value[i]; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool v) { n_->requires_grad = v; }

  bool has_grad() const { return n_->grad.size() == n_->value.size(); }
  std::vector<Real>& grad() { return n_->ensure_grad(); }
  const std::vector<Real>& grad() const {
    if (!has_grad()) throw ValueError("tensor has no gradient");
    return n_->grad;
  }
  void zero_grad() { n_->grad.assign(n_->value.size(), Real(0)); }

  Real item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor");
    return n_->value[0];
  }

  // Detached copy of the values (new storage, no graph history).
  Tensor detach_copy() const { return Tensor(n_->shape, n_->value, false); }

  std::shared_ptr<Node> node() const { return n_; }

  static Tensor from_node(std::shared_ptr<Node> n) {
    Tensor t;
    t.n_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<Node> n_;
};

namespace detail {

template <class Real>
void topo_order(TensorNode<Real>* root,
                std::vector<TensorNode<Real>*>& order) {
  std::unordered_set<TensorNode<Real>*> seen;
  std::vector<std::pair<TensorNode<Real>*, std::size_t>> stack;
  stack.push_back({root, 0});
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode<Real>* child = node->inputs[next++].get();
      if (seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

// Reverse-mode sweep from a scalar root. Gradients accumulate additively,
// so fan-out sums contributions; each node's backprop runs exactly once.
template <class Real>
void backward(const Tensor<Real>& root) {
  if (root.size() != 1) throw ShapeError("backward() root must be scalar");
  if (!root.requires_grad())
    throw ValueError("backward() root does not require grad");
  std::vector<TensorNode<Real>*> order;
  detail::topo_order(root.node().get(), order);
  root.node()->ensure_grad();
  root.node()->grad[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<Real>* node = *it;
    if (node->backprop && node->grad.size() == node->value.size())
      node->backprop(*node);
  }
}

}  // namespace pef
