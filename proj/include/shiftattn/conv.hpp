#pragma once

#include <cstddef>
#include <vector>

#include "shiftattn/gemm.hpp"
#include "shiftattn/ops.hpp"
#include "shiftattn/tensor.hpp"
#include "shiftattn/threading.hpp"

namespace shiftattn {

/// Which convolution kernel to run. Direct is the loop-nest reference that
/// defines the semantics; Im2col is the optimized route and must agree with
/// it. Auto picks Direct for 64-bit scalars (the verification mode, where
/// bit-level accumulation order matters) and Im2col for 32-bit training.
enum class ConvImpl { Auto, Direct, Im2col };

struct ConvGeom {
  std::size_t n, c, h, w;   // input
  std::size_t d, s;         // kernel
  std::size_t stride, pad;
  std::size_t ho, wo;

  static ConvGeom of(const Shape& x, const Shape& weight, std::size_t stride,
                     std::size_t pad) {
    if (x.size() != 4) fail("conv2d: input must be (N,C,H,W), got " + shape_str(x));
    if (weight.size() != 4 || weight[2] != weight[3])
      fail("conv2d: weights must be (D,C,S,S), got " + shape_str(weight));
    if (weight[2] % 2 == 0) fail("conv2d: kernel size must be odd");
    if (x[1] != weight[1])
      fail("conv2d: input has " + std::to_string(x[1]) + " channels, weights expect " +
           std::to_string(weight[1]));
    if (stride == 0) fail("conv2d: stride must be positive");
    ConvGeom g;
    g.n = x[0]; g.c = x[1]; g.h = x[2]; g.w = x[3];
    g.d = weight[0]; g.s = weight[2];
    g.stride = stride; g.pad = pad;
    if (g.h + 2 * pad < g.s || g.w + 2 * pad < g.s)
      fail("conv2d: kernel larger than padded input");
    g.ho = (g.h + 2 * pad - g.s) / stride + 1;
    g.wo = (g.w + 2 * pad - g.s) / stride + 1;
    return g;
  }

  /// Centering pad for "same" output at stride 1.
  static std::size_t same_pad(std::size_t s) { return (s - 1) / 2; }
};

// ---- reference kernel ------------------------------------------------------

/// y[n,d,i,j] = sum_c sum_{u,v} x[n,c, i*stride+u-pad, j*stride+v-pad] * w[d,c,u,v]
/// with zero padding. Accumulation is c-major per output element; the shift
/// kernel mirrors that order so the two agree exactly.
template <class Real>
void conv2d_forward_direct(const Real* x, const Real* w, const Real* bias,
                           const ConvGeom& g, Real* y) {
  parallel_for(g.n, [&](std::size_t nb, std::size_t ne) {
    for (std::size_t n = nb; n < ne; ++n)
      for (std::size_t d = 0; d < g.d; ++d)
        for (std::size_t i = 0; i < g.ho; ++i)
          for (std::size_t j = 0; j < g.wo; ++j) {
            Real acc = bias ? bias[d] : Real(0);
            for (std::size_t c = 0; c < g.c; ++c) {
              const Real* xc = x + ((n * g.c + c) * g.h) * g.w;
              const Real* wc = w + ((d * g.c + c) * g.s) * g.s;
              for (std::size_t u = 0; u < g.s; ++u) {
                const std::ptrdiff_t ii =
                    static_cast<std::ptrdiff_t>(i * g.stride + u) -
                    static_cast<std::ptrdiff_t>(g.pad);
                if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.h)) continue;
                for (std::size_t v = 0; v < g.s; ++v) {
                  const std::ptrdiff_t jj =
                      static_cast<std::ptrdiff_t>(j * g.stride + v) -
                      static_cast<std::ptrdiff_t>(g.pad);
                  if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.w)) continue;
                  acc += wc[u * g.s + v] * xc[ii * g.w + jj];
                }
              }
            }
            y[((n * g.d + d) * g.ho + i) * g.wo + j] = acc;
          }
  });
}

template <class Real>
void conv2d_backward_direct(const Real* x, const Real* w, const Real* gy,
                            const ConvGeom& g, Real* dx, Real* dw, Real* db) {
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t d = 0; d < g.d; ++d)
      for (std::size_t i = 0; i < g.ho; ++i)
        for (std::size_t j = 0; j < g.wo; ++j) {
          const Real go = gy[((n * g.d + d) * g.ho + i) * g.wo + j];
          if (db) db[d] += go;
          for (std::size_t c = 0; c < g.c; ++c)
            for (std::size_t u = 0; u < g.s; ++u) {
              const std::ptrdiff_t ii =
                  static_cast<std::ptrdiff_t>(i * g.stride + u) -
                  static_cast<std::ptrdiff_t>(g.pad);
              if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.h)) continue;
              for (std::size_t v = 0; v < g.s; ++v) {
                const std::ptrdiff_t jj =
                    static_cast<std::ptrdiff_t>(j * g.stride + v) -
                    static_cast<std::ptrdiff_t>(g.pad);
                if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.w)) continue;
                const std::size_t xi = ((n * g.c + c) * g.h + ii) * g.w + jj;
                const std::size_t wi = ((d * g.c + c) * g.s + u) * g.s + v;
                if (dx) dx[xi] += go * w[wi];
                if (dw) dw[wi] += go * x[xi];
              }
            }
        }
}

// ---- im2col kernel ---------------------------------------------------------

/// col is (C*S*S, N*Ho*Wo): row k = (c,u,v), column = n*Ho*Wo + i*Wo + j.
template <class Real>
void im2col(const Real* x, const ConvGeom& g, Real* col) {
  const std::size_t p = g.ho * g.wo;
  const std::size_t np = g.n * p;
  parallel_for(g.n, [&](std::size_t nb, std::size_t ne) {
    for (std::size_t n = nb; n < ne; ++n)
      for (std::size_t c = 0; c < g.c; ++c) {
        const Real* xc = x + (n * g.c + c) * g.h * g.w;
        for (std::size_t u = 0; u < g.s; ++u)
          for (std::size_t v = 0; v < g.s; ++v) {
            Real* row = col + ((c * g.s + u) * g.s + v) * np + n * p;
            for (std::size_t i = 0; i < g.ho; ++i) {
              const std::ptrdiff_t ii =
                  static_cast<std::ptrdiff_t>(i * g.stride + u) -
                  static_cast<std::ptrdiff_t>(g.pad);
              for (std::size_t j = 0; j < g.wo; ++j) {
                const std::ptrdiff_t jj =
                    static_cast<std::ptrdiff_t>(j * g.stride + v) -
                    static_cast<std::ptrdiff_t>(g.pad);
                row[i * g.wo + j] =
                    (ii >= 0 && ii < static_cast<std::ptrdiff_t>(g.h) &&
                     jj >= 0 && jj < static_cast<std::ptrdiff_t>(g.w))
                        ? xc[ii * g.w + jj]
                        : Real(0);
              }
            }
          }
      }
  });
}

template <class Real>
void col2im(const Real* col, const ConvGeom& g, Real* dx_accum) {
  const std::size_t p = g.ho * g.wo;
  const std::size_t np = g.n * p;
  parallel_for(g.n, [&](std::size_t nb, std::size_t ne) {
    for (std::size_t n = nb; n < ne; ++n)
      for (std::size_t c = 0; c < g.c; ++c) {
        Real* xc = dx_accum + (n * g.c + c) * g.h * g.w;
        for (std::size_t u = 0; u < g.s; ++u)
          for (std::size_t v = 0; v < g.s; ++v) {
            const Real* row = col + ((c * g.s + u) * g.s + v) * np + n * p;
            for (std::size_t i = 0; i < g.ho; ++i) {
              const std::ptrdiff_t ii =
                  static_cast<std::ptrdiff_t>(i * g.stride + u) -
                  static_cast<std::ptrdiff_t>(g.pad);
              if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.h)) continue;
              for (std::size_t j = 0; j < g.wo; ++j) {
                const std::ptrdiff_t jj =
                    static_cast<std::ptrdiff_t>(j * g.stride + v) -
                    static_cast<std::ptrdiff_t>(g.pad);
                if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.w)) continue;
                xc[ii * g.w + jj] += row[i * g.wo + j];
              }
            }
          }
      }
  });
}

template <class Real>
void conv2d_forward_im2col(const Real* x, const Real* w, const Real* bias,
                           const ConvGeom& g, Real* y) {
  const std::size_t k = g.c * g.s * g.s;
  const std::size_t p = g.ho * g.wo;
  const std::size_t np = g.n * p;
  std::vector<Real> col(k * np);
  im2col(x, g, col.data());
  std::vector<Real> ymat(g.d * np);
  gemm(g.d, k, np, w, col.data(), ymat.data());
  parallel_for(g.n, [&](std::size_t nb, std::size_t ne) {
    for (std::size_t n = nb; n < ne; ++n)
      for (std::size_t d = 0; d < g.d; ++d) {
        const Real* src = ymat.data() + d * np + n * p;
        Real* dst = y + (n * g.d + d) * p;
        const Real b = bias ? bias[d] : Real(0);
        for (std::size_t q = 0; q < p; ++q) dst[q] = src[q] + b;
      }
  });
}

template <class Real>
void conv2d_backward_im2col(const Real* x, const Real* w, const Real* gy,
                            const ConvGeom& g, Real* dx, Real* dw, Real* db) {
  const std::size_t k = g.c * g.s * g.s;
  const std::size_t p = g.ho * g.wo;
  const std::size_t np = g.n * p;
  // Regroup gy (N,D,P) as (D, N*P) to match the col layout.
  std::vector<Real> gmat(g.d * np);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t d = 0; d < g.d; ++d) {
      const Real* src = gy + (n * g.d + d) * p;
      Real* dst = gmat.data() + d * np + n * p;
      for (std::size_t q = 0; q < p; ++q) dst[q] = src[q];
    }
  if (db) {
    for (std::size_t d = 0; d < g.d; ++d) {
      Real acc = Real(0);
      const Real* row = gmat.data() + d * np;
      for (std::size_t q = 0; q < np; ++q) acc += row[q];
      db[d] += acc;
    }
  }
  if (dw) {
    std::vector<Real> col(k * np);
    im2col(x, g, col.data());
    std::vector<Real> dwm(g.d * k);
    gemm_abt(g.d, np, k, gmat.data(), col.data(), dwm.data());
    for (std::size_t i = 0; i < dwm.size(); ++i) dw[i] += dwm[i];
  }
  if (dx) {
    const std::vector<Real> wt = transpose(w, g.d, k);
    std::vector<Real> dcol(k * np);
    gemm(k, g.d, np, wt.data(), gmat.data(), dcol.data());
    col2im(dcol.data(), g, dx);
  }
}

// ---- autograd binding ------------------------------------------------------

template <class Real>
constexpr ConvImpl resolve_impl(ConvImpl impl) {
  if (impl != ConvImpl::Auto) return impl;
  return sizeof(Real) == 8 ? ConvImpl::Direct : ConvImpl::Im2col;
}

/// 2-D convolution with zero padding (defaults to the centering pad, so
/// stride-1 output matches the input spatially). `bias` may be undefined.
template <class Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w,
                    const Tensor<Real>& bias, std::size_t stride,
                    std::size_t pad, ConvImpl impl = ConvImpl::Auto) {
  const ConvGeom g = ConvGeom::of(x.shape(), w.shape(), stride, pad);
  if (bias.defined() && bias.size() != g.d)
    fail("conv2d: bias length must equal output channels");
  const ConvImpl chosen = resolve_impl<Real>(impl);
  std::vector<Real> y(g.n * g.d * g.ho * g.wo);
  const Real* bp = bias.defined() ? bias.data() : nullptr;
  if (chosen == ConvImpl::Direct)
    conv2d_forward_direct(x.data(), w.data(), bp, g, y.data());
  else
    conv2d_forward_im2col(x.data(), w.data(), bp, g, y.data());

  std::vector<Tensor<Real>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  auto xn = x.node().get();
  auto wn = w.node().get();
  auto bn = bias.defined() ? bias.node().get() : nullptr;
  auto backward = [g, chosen, xn, wn, bn](detail::Node<Real>& self) {
    Real* dx = nullptr;
    Real* dw = nullptr;
    Real* db = nullptr;
    if (xn->requires_grad) { xn->ensure_grad(); dx = xn->grad.data(); }
    if (wn->requires_grad) { wn->ensure_grad(); dw = wn->grad.data(); }
    if (bn && bn->requires_grad) { bn->ensure_grad(); db = bn->grad.data(); }
    if (!dx && !dw && !db) return;
    if (chosen == ConvImpl::Direct)
      conv2d_backward_direct(xn->value.data(), wn->value.data(),
                             self.grad.data(), g, dx, dw, db);
    else
      conv2d_backward_im2col(xn->value.data(), wn->value.data(),
                             self.grad.data(), g, dx, dw, db);
  };
  return detail::make_op<Real>(Shape{g.n, g.d, g.ho, g.wo}, std::move(inputs),
                               std::move(y), std::move(backward), "conv2d");
}

template <class Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w,
                    std::size_t stride = 1, ConvImpl impl = ConvImpl::Auto) {
  return conv2d(x, w, Tensor<Real>{}, stride, ConvGeom::same_pad(w.dim(2)), impl);
}

}  // namespace shiftattn
