#pragma once

#include <cstddef>
#include <vector>

#include "shiftattn/threading.hpp"

namespace shiftattn {

/// C(M,N) = A(M,K) * B(K,N), all row-major. Each output element is a single
/// accumulator walked over k in increasing order, so the result is identical
/// for any thread count or tile size; only the j loop is vectorized.
template <class Real>
void gemm(std::size_t m, std::size_t k, std::size_t n, const Real* a,
          const Real* b, Real* c) {
  constexpr std::size_t kRowBlock = 4;
  parallel_for((m + kRowBlock - 1) / kRowBlock, [&](std::size_t bb, std::size_t be) {
    for (std::size_t blk = bb; blk < be; ++blk) {
      const std::size_t i0 = blk * kRowBlock;
      const std::size_t ilim = std::min(m, i0 + kRowBlock);
      // Panel the columns so four C rows stay cache-resident while one B row
      // is streamed across them.
      constexpr std::size_t kPanel = 512;
      for (std::size_t j0 = 0; j0 < n; j0 += kPanel) {
        const std::size_t jlim = std::min(n, j0 + kPanel);
        for (std::size_t i = i0; i < ilim; ++i)
          for (std::size_t j = j0; j < jlim; ++j) c[i * n + j] = Real(0);
        if (ilim - i0 == kRowBlock) {
          Real* __restrict c0 = c + (i0 + 0) * n;
          Real* __restrict c1 = c + (i0 + 1) * n;
          Real* __restrict c2 = c + (i0 + 2) * n;
          Real* __restrict c3 = c + (i0 + 3) * n;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const Real* __restrict br = b + kk * n;
            const Real a0 = a[(i0 + 0) * k + kk];
            const Real a1 = a[(i0 + 1) * k + kk];
            const Real a2 = a[(i0 + 2) * k + kk];
            const Real a3 = a[(i0 + 3) * k + kk];
            for (std::size_t j = j0; j < jlim; ++j) {
              c0[j] += a0 * br[j];
              c1[j] += a1 * br[j];
              c2[j] += a2 * br[j];
              c3[j] += a3 * br[j];
            }
          }
        } else {
          for (std::size_t i = i0; i < ilim; ++i) {
            Real* __restrict ci = c + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
              const Real aik = a[i * k + kk];
              const Real* __restrict br = b + kk * n;
              for (std::size_t j = j0; j < jlim; ++j) ci[j] += aik * br[j];
            }
          }
        }
      }
    }
  });
}

/// C(M,N) = A(M,K) * B(N,K)^T (both operands row-major, B holds N rows of
/// length K). Lane-split partial sums make the dot products vectorizable
/// without -ffast-math; lane structure is fixed, so results are still
/// deterministic for a given build.
template <class Real>
void gemm_abt(std::size_t m, std::size_t k, std::size_t n, const Real* a,
              const Real* b, Real* c) {
  constexpr std::size_t kLanes = 16;
  parallel_for(m, [&](std::size_t ib, std::size_t ie) {
    for (std::size_t i = ib; i < ie; ++i) {
      const Real* __restrict ar = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const Real* __restrict br = b + j * k;
        Real lane[kLanes] = {};
        std::size_t kk = 0;
        for (; kk + kLanes <= k; kk += kLanes)
          for (std::size_t l = 0; l < kLanes; ++l)
            lane[l] += ar[kk + l] * br[kk + l];
        Real tail = Real(0);
        for (; kk < k; ++kk) tail += ar[kk] * br[kk];
        Real sum = tail;
        for (std::size_t l = 0; l < kLanes; ++l) sum += lane[l];
        c[i * n + j] = sum;
      }
    }
  });
}

template <class Real>
std::vector<Real> transpose(const Real* a, std::size_t rows, std::size_t cols) {
  std::vector<Real> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
  return t;
}

}  // namespace shiftattn
