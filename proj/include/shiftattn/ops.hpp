#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "shiftattn/gemm.hpp"
#include "shiftattn/tensor.hpp"

namespace shiftattn {

namespace detail {

/// NumPy-style broadcast result shape (right-aligned; size-1 dims stretch).
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* what) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      fail(std::string(what) + ": shapes " + shape_str(a) + " and " +
           shape_str(b) + " are not broadcast-compatible");
    out[i] = std::max(da, db);
  }
  return out;
}

/// Strides of `s` padded to `rank`, with 0 where the dim is broadcast.
inline std::vector<std::size_t> broadcast_strides(const Shape& s,
                                                  std::size_t rank) {
  const auto st = row_strides(s);
  std::vector<std::size_t> out(rank, 0);
  const std::size_t off = rank - s.size();
  for (std::size_t i = 0; i < s.size(); ++i)
    out[off + i] = s[i] == 1 ? 0 : st[i];
  return out;
}

/// Walks an output index space, handing the linear offsets of both inputs to
/// `fn`. Fast path when no broadcasting is involved.
template <class Fn>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb,
                        Fn&& fn) {
  const std::size_t n = numel(out);
  if (sa == out && sb == out) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t r = out.size();
  const auto so = row_strides(out);
  const auto sta = broadcast_strides(sa, r);
  const auto stb = broadcast_strides(sb, r);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out[d]) {
        ia += sta[d];
        ib += stb[d];
        break;
      }
      idx[d] = 0;
      ia -= sta[d] * (out[d] - 1);
      ib -= stb[d] * (out[d] - 1);
    }
  }
}

/// Sums an out-shaped gradient back down to a (possibly broadcast) parent.
template <class Real>
void accumulate_reduced(const Shape& out, const Shape& parent,
                        const std::vector<Real>& g, std::vector<Real>& dst) {
  if (parent == out) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    return;
  }
  const std::size_t r = out.size();
  const auto stp = broadcast_strides(parent, r);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ip = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    dst[ip] += g[i];
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out[d]) {
        ip += stp[d];
        break;
      }
      idx[d] = 0;
      ip -= stp[d] * (out[d] - 1);
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

template <class Real>
Tensor<Real> binary(BinOp op, const Tensor<Real>& a, const Tensor<Real>& b,
                    const char* what) {
  const Shape out = broadcast_shape(a.shape(), b.shape(), what);
  std::vector<Real> v(numel(out));
  const Real* pa = a.data();
  const Real* pb = b.data();
  switch (op) {
    case BinOp::Add:
      for_each_broadcast(out, a.shape(), b.shape(),
                         [&](auto i, auto ia, auto ib) { v[i] = pa[ia] + pb[ib]; });
      break;
    case BinOp::Sub:
      for_each_broadcast(out, a.shape(), b.shape(),
                         [&](auto i, auto ia, auto ib) { v[i] = pa[ia] - pb[ib]; });
      break;
    case BinOp::Mul:
      for_each_broadcast(out, a.shape(), b.shape(),
                         [&](auto i, auto ia, auto ib) { v[i] = pa[ia] * pb[ib]; });
      break;
    case BinOp::Div:
      for_each_broadcast(out, a.shape(), b.shape(),
                         [&](auto i, auto ia, auto ib) { v[i] = pa[ia] / pb[ib]; });
      break;
  }
  auto an = a.node();
  auto bn = b.node();
  auto backward = [op, out, an = an.get(), bn = bn.get()](detail::Node<Real>& self) {
    const std::vector<Real>& g = self.grad;
    const bool need_a = an->requires_grad;
    const bool need_b = bn->requires_grad;
    if (need_a) an->ensure_grad();
    if (need_b) bn->ensure_grad();
    switch (op) {
      case BinOp::Add:
        if (need_a) accumulate_reduced(out, an->shape, g, an->grad);
        if (need_b) accumulate_reduced(out, bn->shape, g, bn->grad);
        break;
      case BinOp::Sub: {
        if (need_a) accumulate_reduced(out, an->shape, g, an->grad);
        if (need_b) {
          std::vector<Real> neg(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
          accumulate_reduced(out, bn->shape, neg, bn->grad);
        }
        break;
      }
      case BinOp::Mul: {
        std::vector<Real> ga(need_a ? g.size() : 0), gb(need_b ? g.size() : 0);
        for_each_broadcast(out, an->shape, bn->shape,
                           [&](auto i, auto ia, auto ib) {
                             if (need_a) ga[i] = g[i] * bn->value[ib];
                             if (need_b) gb[i] = g[i] * an->value[ia];
                           });
        if (need_a) accumulate_reduced(out, an->shape, ga, an->grad);
        if (need_b) accumulate_reduced(out, bn->shape, gb, bn->grad);
        break;
      }
      case BinOp::Div: {
        std::vector<Real> ga(need_a ? g.size() : 0), gb(need_b ? g.size() : 0);
        for_each_broadcast(out, an->shape, bn->shape,
                           [&](auto i, auto ia, auto ib) {
                             const Real d = bn->value[ib];
                             if (need_a) ga[i] = g[i] / d;
                             if (need_b) gb[i] = -g[i] * an->value[ia] / (d * d);
                           });
        if (need_a) accumulate_reduced(out, an->shape, ga, an->grad);
        if (need_b) accumulate_reduced(out, bn->shape, gb, bn->grad);
        break;
      }
    }
  };
  return make_op<Real>(out, {a, b}, std::move(v), std::move(backward), what);
}

}  // namespace detail

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary(detail::BinOp::Add, a, b, "add");
}
template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary(detail::BinOp::Sub, a, b, "sub");
}
template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary(detail::BinOp::Mul, a, b, "mul");
}
template <class Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary(detail::BinOp::Div, a, b, "div");
}

template <class Real>
Tensor<Real> add_scalar(const Tensor<Real>& a, Real s) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + s;
  auto an = a.node().get();
  return detail::make_op<Real>(
      a.shape(), {a}, std::move(v),
      [an](detail::Node<Real>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i];
      },
      "add_scalar");
}

template <class Real>
Tensor<Real> mul_scalar(const Tensor<Real>& a, Real s) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * s;
  auto an = a.node().get();
  return detail::make_op<Real>(
      a.shape(), {a}, std::move(v),
      [an, s](detail::Node<Real>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i] * s;
      },
      "mul_scalar");
}

template <class Real>
Tensor<Real> operator+(const Tensor<Real>& a, const Tensor<Real>& b) { return add(a, b); }
template <class Real>
Tensor<Real> operator-(const Tensor<Real>& a, const Tensor<Real>& b) { return sub(a, b); }
template <class Real>
Tensor<Real> operator*(const Tensor<Real>& a, const Tensor<Real>& b) { return mul(a, b); }
template <class Real>
Tensor<Real> operator/(const Tensor<Real>& a, const Tensor<Real>& b) { return div(a, b); }

/// Same data, new shape (element count must match). Gradient reshapes back.
template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (numel(shape) != a.size())
    fail("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  auto an = a.node().get();
  return detail::make_op<Real>(
      std::move(shape), {a}, a.values(),
      [an](detail::Node<Real>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i];
      },
      "reshape");
}

template <class Real>
Tensor<Real> transpose2d(const Tensor<Real>& a) {
  if (a.rank() != 2) fail("transpose2d expects a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<Real> v = transpose(a.data(), r, c);
  auto an = a.node().get();
  return detail::make_op<Real>(
      Shape{c, r}, {a}, std::move(v),
      [an, r, c](detail::Node<Real>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < c; ++i)
          for (std::size_t j = 0; j < r; ++j)
            an->grad[j * c + i] += self.grad[i * r + j];
      },
      "transpose2d");
}

/// Matrix product (M,K)x(K,N). Gradients: dA = G B^T, dB = A^T G.
template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    fail("matmul expects matrices, got " + shape_str(a.shape()) + " and " +
         shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    fail("matmul: inner dims differ, " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  std::vector<Real> v(m * n);
  gemm(m, k, n, a.data(), b.data(), v.data());
  auto an = a.node().get();
  auto bn = b.node().get();
  return detail::make_op<Real>(
      Shape{m, n}, {a, b}, std::move(v),
      [an, bn, m, k, n](detail::Node<Real>& self) {
        const Real* g = self.grad.data();
        if (an->requires_grad) {
          an->ensure_grad();
          std::vector<Real> da(m * k);
          gemm_abt(m, n, k, g, bn->value.data(), da.data());
          for (std::size_t i = 0; i < da.size(); ++i) an->grad[i] += da[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          const std::vector<Real> at = transpose(an->value.data(), m, k);
          std::vector<Real> db(k * n);
          gemm(k, m, n, at.data(), g, db.data());
          for (std::size_t i = 0; i < db.size(); ++i) bn->grad[i] += db[i];
        }
      },
      "matmul");
}

// ---- reductions ----------------------------------------------------------

namespace detail {

struct ReducePlan {
  Shape out_shape;          // with keepdims applied
  Shape keep_shape;         // reduced dims kept as 1 (mapping space)
  std::size_t count = 1;    // elements folded into each output cell
};

inline ReducePlan reduce_plan(const Shape& in, std::vector<std::size_t> axes,
                              bool keepdims) {
  if (axes.empty())
    for (std::size_t i = 0; i < in.size(); ++i) axes.push_back(i);
  std::sort(axes.begin(), axes.end());
  ReducePlan p;
  p.keep_shape = in;
  for (auto ax : axes) {
    if (ax >= in.size()) fail("reduce: axis out of range for " + shape_str(in));
    p.count *= in[ax];
    p.keep_shape[ax] = 1;
  }
  if (p.count == 0) fail("reduce over an empty set of elements");
  if (keepdims) {
    p.out_shape = p.keep_shape;
  } else {
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (std::find(axes.begin(), axes.end(), i) == axes.end())
        p.out_shape.push_back(in[i]);
    }
  }
  return p;
}

/// Calls fn(in_linear, out_linear) over every input element.
template <class Fn>
void for_each_reduce(const Shape& in, const Shape& keep, Fn&& fn) {
  const auto sto = broadcast_strides(keep, in.size());
  std::vector<std::size_t> idx(in.size(), 0);
  const std::size_t n = numel(in);
  std::size_t io = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, io);
    for (std::size_t d = in.size(); d-- > 0;) {
      if (++idx[d] < in[d]) {
        io += sto[d];
        break;
      }
      idx[d] = 0;
      io -= sto[d] * (in[d] - 1);
    }
  }
}

}  // namespace detail

template <class Real>
Tensor<Real> sum(const Tensor<Real>& a, std::vector<std::size_t> axes = {},
                 bool keepdims = false) {
  const auto plan = detail::reduce_plan(a.shape(), axes, keepdims);
  std::vector<Real> v(numel(plan.out_shape), Real(0));
  detail::for_each_reduce(a.shape(), plan.keep_shape,
                          [&](auto i, auto o) { v[o] += a.data()[i]; });
  auto an = a.node().get();
  const Shape in = a.shape();
  const Shape keep = plan.keep_shape;
  return detail::make_op<Real>(
      plan.out_shape, {a}, std::move(v),
      [an, in, keep](detail::Node<Real>& self) {
        an->ensure_grad();
        detail::for_each_reduce(in, keep, [&](auto i, auto o) {
          an->grad[i] += self.grad[o];
        });
      },
      "sum");
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& a, std::vector<std::size_t> axes = {},
                  bool keepdims = false) {
  const auto plan = detail::reduce_plan(a.shape(), axes, keepdims);
  const Real inv = Real(1) / static_cast<Real>(plan.count);
  std::vector<Real> v(numel(plan.out_shape), Real(0));
  detail::for_each_reduce(a.shape(), plan.keep_shape,
                          [&](auto i, auto o) { v[o] += a.data()[i]; });
  for (auto& x : v) x *= inv;
  auto an = a.node().get();
  const Shape in = a.shape();
  const Shape keep = plan.keep_shape;
  return detail::make_op<Real>(
      plan.out_shape, {a}, std::move(v),
      [an, in, keep, inv](detail::Node<Real>& self) {
        an->ensure_grad();
        detail::for_each_reduce(in, keep, [&](auto i, auto o) {
          an->grad[i] += self.grad[o] * inv;
        });
      },
      "mean");
}

/// Max reduction; gradient routes to the first (lowest linear index) maximum
/// of each cell.
template <class Real>
Tensor<Real> max(const Tensor<Real>& a, std::vector<std::size_t> axes = {},
                 bool keepdims = false) {
  const auto plan = detail::reduce_plan(a.shape(), axes, keepdims);
  std::vector<Real> v(numel(plan.out_shape), std::numeric_limits<Real>::lowest());
  std::vector<std::size_t> arg(v.size(), 0);
  detail::for_each_reduce(a.shape(), plan.keep_shape, [&](auto i, auto o) {
    if (a.data()[i] > v[o]) {
      v[o] = a.data()[i];
      arg[o] = i;
    }
  });
  auto an = a.node().get();
  return detail::make_op<Real>(
      plan.out_shape, {a}, std::move(v),
      [an, arg = std::move(arg)](detail::Node<Real>& self) {
        an->ensure_grad();
        for (std::size_t o = 0; o < self.grad.size(); ++o)
          an->grad[arg[o]] += self.grad[o];
      },
      "max");
}

template <class Real>
Tensor<Real> sqrt(const Tensor<Real>& a) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = std::sqrt(a.data()[i]);
  auto an = a.node().get();
  return detail::make_op<Real>(
      a.shape(), {a}, std::move(v),
      [an](detail::Node<Real>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          // tiny guard keeps zero-variance slices from emitting inf
          const Real s = self.value[i] + Real(1e-20);
          an->grad[i] += self.grad[i] / (Real(2) * s);
        }
      },
      "sqrt");
}

/// Standard deviation over `axes`. ddof=0 is the population convention
/// (divide by n) used throughout this library; ddof=1 gives the sample
/// convention. Composed from primitives so gradients flow through it.
template <class Real>
Tensor<Real> stddev(const Tensor<Real>& a, std::vector<std::size_t> axes = {},
                    bool keepdims = false, int ddof = 0) {
  const auto plan = detail::reduce_plan(a.shape(), axes, keepdims);
  auto mu = mean(a, axes, /*keepdims=*/true);
  auto d = sub(a, mu);
  auto var = mean(mul(d, d), axes, keepdims);
  if (ddof == 1) {
    if (plan.count < 2) fail("stddev: ddof=1 needs at least two elements");
    var = mul_scalar(var, static_cast<Real>(plan.count) /
                              static_cast<Real>(plan.count - 1));
  }
  return shiftattn::sqrt(var);
}

template <class Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = a.data()[i] > Real(0) ? a.data()[i] : Real(0);
  auto an = a.node().get();
  return detail::make_op<Real>(
      a.shape(), {a}, std::move(v),
      [an](detail::Node<Real>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (an->value[i] > Real(0)) an->grad[i] += self.grad[i];
      },
      "relu");
}

/// Row softmax over the last dimension, numerically stabilized.
template <class Real>
Tensor<Real> softmax_lastdim(const Tensor<Real>& a) {
  if (a.rank() == 0) fail("softmax_lastdim needs at least one dimension");
  const std::size_t k = a.shape().back();
  const std::size_t rows = a.size() / k;
  std::vector<Real> v(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* x = a.data() + r * k;
    Real* y = v.data() + r * k;
    Real mx = x[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
    Real z = Real(0);
    for (std::size_t j = 0; j < k; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < k; ++j) y[j] /= z;
  }
  auto an = a.node().get();
  return detail::make_op<Real>(
      a.shape(), {a}, std::move(v),
      [an, rows, k](detail::Node<Real>& self) {
        an->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* y = self.value.data() + r * k;
          const Real* g = self.grad.data() + r * k;
          Real dot = Real(0);
          for (std::size_t j = 0; j < k; ++j) dot += g[j] * y[j];
          for (std::size_t j = 0; j < k; ++j)
            an->grad[r * k + j] += y[j] * (g[j] - dot);
        }
      },
      "softmax");
}

}  // namespace shiftattn
