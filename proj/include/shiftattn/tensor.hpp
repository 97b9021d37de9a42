#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "shiftattn/rng.hpp"

namespace shiftattn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

/// Row-major strides, innermost dimension contiguous.
inline std::vector<std::size_t> row_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

namespace detail {

template <class Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // allocated on demand, same length as value
  bool requires_grad = false;
  // Inputs this node was computed from. Ownership lives here; backward
  // closures capture raw pointers only, so the graph has no reference cycles.
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
  }
};

template <class Real>
inline void check_finite(const Node<Real>& n, const char* what) {
#ifndef NDEBUG
  for (const Real v : n.value) {
    if (!std::isfinite(static_cast<double>(v))) {
      fail(std::string("non-finite value produced by ") + what + " with shape " +
           shape_str(n.shape));
    }
  }
#else
  (void)n;
  (void)what;
#endif
}

}  // namespace detail

/// Dense rank-<=4 real tensor with reverse-mode autodiff over a dynamic
/// graph. A Tensor is a cheap shared handle; values are treated as immutable
/// once an op has consumed them (the optimizer is the one sanctioned
/// exception and runs between steps).
template <class Real>
class Tensor {
 public:
  using Scalar = Real;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), Real(0), requires_grad);
  }

  static Tensor filled(Shape shape, Real v, bool requires_grad = false) {
    auto n = std::make_shared<detail::Node<Real>>();
    n->value.assign(numel(shape), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(Shape shape, std::vector<Real> data,
                          bool requires_grad = false) {
    if (numel(shape) != data.size())
      fail("tensor data length " + std::to_string(data.size()) +
           " does not match shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node<Real>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(Real v, bool requires_grad = false) {
    return from_data({}, {v}, requires_grad);
  }

  static Tensor uniform(Shape shape, Rng& rng, Real lo = Real(0),
                        Real hi = Real(1), bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node()->value)
      v = static_cast<Real>(rng.uniform(static_cast<double>(lo),
                                        static_cast<double>(hi)));
    return t;
  }

  static Tensor normal(Shape shape, Rng& rng, Real mean = Real(0),
                       Real stddev = Real(1), bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node()->value)
      v = static_cast<Real>(rng.normal(static_cast<double>(mean),
                                       static_cast<double>(stddev)));
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t size() const { return n_->value.size(); }
  bool requires_grad() const { return n_->requires_grad; }
  bool has_grad() const { return n_ && !n_->grad.empty(); }

  Real* data() { return n_->value.data(); }
  const Real* data() const { return n_->value.data(); }
  std::vector<Real>& values() { return n_->value; }
  const std::vector<Real>& values() const { return n_->value; }

  Real* grad_data() {
    n_->ensure_grad();
    return n_->grad.data();
  }
  const std::vector<Real>& grad() const { return n_->grad; }

  Real item() const {
    if (size() != 1) fail("item() on non-scalar tensor " + shape_str(shape()));
    return n_->value[0];
  }

  Real at(std::initializer_list<std::size_t> idx) const {
    return n_->value[offset(idx)];
  }
  Real& at(std::initializer_list<std::size_t> idx) {
    return n_->value[offset(idx)];
  }

  void zero_grad() {
    if (n_ && !n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), Real(0));
  }

  /// Reverse pass from a scalar. Runs each reachable node's backward exactly
  /// once, in reverse topological order; leaf grads accumulate across calls.
  void backward() const {
    if (size() != 1) fail("backward() requires a scalar loss, got " + shape_str(shape()));
    if (!n_->requires_grad) return;

    // Iterative post-order DFS: parents first, then the node itself.
    std::vector<detail::Node<Real>*> order;
    std::unordered_set<detail::Node<Real>*> seen;
    std::vector<std::pair<detail::Node<Real>*, std::size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node<Real>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    n_->ensure_grad();
    n_->grad[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<Real>* node = *it;
      if (node->backward_fn) node->backward_fn(*node);
    }
  }

  std::shared_ptr<detail::Node<Real>>& node() { return n_; }
  const std::shared_ptr<detail::Node<Real>>& node() const { return n_; }

  /// Same values, detached from the graph (no parents, no grad flow).
  Tensor detach() const {
    auto n = std::make_shared<detail::Node<Real>>();
    n->shape = n_->shape;
    n->value = n_->value;
    n->requires_grad = false;
    return Tensor(std::move(n));
  }

  explicit Tensor(std::shared_ptr<detail::Node<Real>> n) : n_(std::move(n)) {}

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    assert(idx.size() == rank());
    const auto st = row_strides(n_->shape);
    std::size_t off = 0, i = 0;
    for (auto v : idx) off += v * st[i++];
    return off;
  }

  std::shared_ptr<detail::Node<Real>> n_;
};

namespace detail {

/// Builds a result node wired to its inputs. The backward closure receives
/// the result node (with its grad filled) and must accumulate into parents.
template <class Real>
Tensor<Real> make_op(Shape shape, std::vector<Tensor<Real>> inputs,
                     std::vector<Real> value,
                     std::function<void(Node<Real>&)> backward,
                     const char* what) {
  auto n = std::make_shared<Node<Real>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  n->requires_grad = needs;
  if (needs) {
    n->parents.reserve(inputs.size());
    for (auto& t : inputs) n->parents.push_back(t.node());
    n->backward_fn = std::move(backward);
  }
  check_finite(*n, what);
  return Tensor<Real>(std::move(n));
}

}  // namespace detail

}  // namespace shiftattn
