#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "shiftattn/conv.hpp"
#include "shiftattn/ops.hpp"
#include "shiftattn/tensor.hpp"

namespace shiftattn {

/// Dense 2-D convolution layer: weights (D,C,S,S), odd S, explicit zero
/// padding (defaults to the centering pad so stride-1 preserves spatial dims).
template <class Real>
struct Conv2dLayer {
  Tensor<Real> weight;
  Tensor<Real> bias;  // optional; undefined when the conv feeds a batchnorm
  std::size_t stride = 1;
  std::size_t padding = 0;

  static Conv2dLayer make(std::size_t in_ch, std::size_t out_ch, std::size_t s,
                          std::size_t stride, Rng& rng, bool with_bias = false) {
    if (s % 2 == 0) fail("conv layer: kernel size must be odd");
    if (in_ch == 0 || out_ch == 0) fail("conv layer: channel counts must be >= 1");
    Conv2dLayer l;
    const Real sd = std::sqrt(Real(2) / static_cast<Real>(in_ch * s * s));
    l.weight = Tensor<Real>::normal({out_ch, in_ch, s, s}, rng, Real(0), sd, true);
    if (with_bias) l.bias = Tensor<Real>::zeros({out_ch}, true);
    l.stride = stride;
    l.padding = ConvGeom::same_pad(s);
    return l;
  }

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t kernel() const { return weight.dim(2); }
};

template <class Real>
Tensor<Real> conv2d_forward(const Tensor<Real>& x, const Conv2dLayer<Real>& l,
                            ConvImpl impl = ConvImpl::Auto) {
  return conv2d(x, l.weight, l.bias, l.stride, l.padding, impl);
}

template <class Real>
struct LinearLayer {
  Tensor<Real> weight;  // (out, in)
  Tensor<Real> bias;    // (out)

  static LinearLayer make(std::size_t in, std::size_t out, Rng& rng) {
    LinearLayer l;
    const Real sd = std::sqrt(Real(2) / static_cast<Real>(in));
    l.weight = Tensor<Real>::normal({out, in}, rng, Real(0), sd, true);
    l.bias = Tensor<Real>::zeros({out}, true);
    return l;
  }
};

/// x: (N, in) -> (N, out). Higher-rank inputs are flattened past dim 0.
template <class Real>
Tensor<Real> linear_forward(const Tensor<Real>& x, const LinearLayer<Real>& l) {
  Tensor<Real> flat = x;
  if (x.rank() != 2) flat = reshape(x, {x.dim(0), x.size() / x.dim(0)});
  if (flat.dim(1) != l.weight.dim(1))
    fail("linear: input features " + std::to_string(flat.dim(1)) +
         " != weight in-dim " + std::to_string(l.weight.dim(1)));
  return add(matmul(flat, transpose2d(l.weight)), l.bias);
}

/// Batch normalization over (N,H,W) per channel. Normalization is built from
/// tape primitives, so its gradient needs no bespoke rule; running stats use
/// the population variance and are updated outside the tape.
template <class Real>
struct BatchNormLayer {
  Tensor<Real> gamma;  // (1,C,1,1)
  Tensor<Real> beta;   // (1,C,1,1)
  std::vector<Real> running_mean;
  std::vector<Real> running_var;
  Real momentum = Real(0.9);
  Real eps = Real(1e-5);

  static BatchNormLayer make(std::size_t channels) {
    BatchNormLayer l;
    l.gamma = Tensor<Real>::filled({1, channels, 1, 1}, Real(1), true);
    l.beta = Tensor<Real>::zeros({1, channels, 1, 1}, true);
    l.running_mean.assign(channels, Real(0));
    l.running_var.assign(channels, Real(1));
    return l;
  }

  std::size_t channels() const { return gamma.dim(1); }
};

template <class Real>
Tensor<Real> batchnorm_forward(const Tensor<Real>& x, BatchNormLayer<Real>& l,
                               bool training) {
  if (x.rank() != 4 || x.dim(1) != l.channels())
    fail("batchnorm: expected (N," + std::to_string(l.channels()) +
         ",H,W), got " + shape_str(x.shape()));
  Tensor<Real> xn;
  if (training) {
    auto mu = mean(x, {0, 2, 3}, true);
    auto centered = sub(x, mu);
    auto var = mean(mul(centered, centered), {0, 2, 3}, true);
    const std::size_t c = l.channels();
    for (std::size_t i = 0; i < c; ++i) {
      l.running_mean[i] = l.momentum * l.running_mean[i] +
                          (Real(1) - l.momentum) * mu.data()[i];
      l.running_var[i] = l.momentum * l.running_var[i] +
                         (Real(1) - l.momentum) * var.data()[i];
    }
    xn = div(centered, shiftattn::sqrt(add_scalar(var, l.eps)));
  } else {
    const std::size_t c = l.channels();
    auto rm = Tensor<Real>::from_data({1, c, 1, 1}, l.running_mean);
    std::vector<Real> denom(c);
    for (std::size_t i = 0; i < c; ++i)
      denom[i] = std::sqrt(l.running_var[i] + l.eps);
    auto rd = Tensor<Real>::from_data({1, c, 1, 1}, std::move(denom));
    xn = div(sub(x, rm), rd);
  }
  return add(mul(xn, l.gamma), l.beta);
}

/// Global average pool: (N,C,H,W) -> (N,C).
template <class Real>
Tensor<Real> avgpool_global(const Tensor<Real>& x) {
  if (x.rank() != 4) fail("avgpool: expected (N,C,H,W), got " + shape_str(x.shape()));
  return mean(x, {2, 3}, false);
}

/// Fused softmax + cross-entropy, mean over the batch.
template <class Real>
Tensor<Real> softmax_xent(const Tensor<Real>& logits,
                          const std::vector<int>& labels) {
  if (logits.rank() != 2)
    fail("softmax_xent: logits must be (N,K), got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) fail("softmax_xent: batch size / label count mismatch");
  std::vector<Real> probs(n * k);
  Real loss = Real(0);
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      fail("softmax_xent: label " + std::to_string(y) + " out of range");
    const Real* z = logits.data() + r * k;
    Real mx = z[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z[j]);
    Real sum = Real(0);
    for (std::size_t j = 0; j < k; ++j) {
      probs[r * k + j] = std::exp(z[j] - mx);
      sum += probs[r * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= sum;
    loss += std::log(sum) + mx - z[y];
  }
  loss /= static_cast<Real>(n);
  auto ln = logits.node().get();
  return detail::make_op<Real>(
      Shape{}, {logits}, {loss},
      [ln, labels, probs = std::move(probs), n, k](detail::Node<Real>& self) {
        ln->ensure_grad();
        const Real g = self.grad[0] / static_cast<Real>(n);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < k; ++j) {
            Real p = probs[r * k + j];
            if (j == static_cast<std::size_t>(labels[r])) p -= Real(1);
            ln->grad[r * k + j] += g * p;
          }
      },
      "softmax_xent");
}

template <class Real>
std::vector<int> argmax_rows(const Tensor<Real>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const Real* z = logits.data() + r * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (z[j] > z[best]) best = j;
    out[r] = static_cast<int>(best);
  }
  return out;
}

}  // namespace shiftattn
