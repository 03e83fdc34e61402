// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "stripformer/parallel.hpp"

namespace stripformer::detail {

// Row-major GEMM kernels. Each output row is produced by one thread with a
// fixed k-loop order, so results do not depend on the thread count. The
// (k, n) axpy order vectorizes well and is the workhorse behind every conv.

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k, bool accumulate) {
  parallel_for(m, 16, [=](int64_t r0, int64_t r1) {
    for (int64_t i = r0; i < r1; ++i) {
      T* ci = c + i * n;
      if (!accumulate) {
        for (int64_t j = 0; j < n; ++j) ci[j] = T(0);
      }
      const T* ai = a + i * k;
      for (int64_t p = 0; p < k; ++p) {
        const T aik = ai[p];
        if (aik == T(0)) continue;
        const T* bp = b + p * n;
        for (int64_t j = 0; j < n; ++j) ci[j] += aik * bp[j];
      }
    }
  });
}

// Blocked out-of-place transpose: dst[c*rows + r] = src[r*cols + c].
template <typename T>
void transpose_mat(const T* src, T* dst, int64_t rows, int64_t cols) {
  constexpr int64_t blk = 32;
  for (int64_t r0 = 0; r0 < rows; r0 += blk) {
    const int64_t r1 = std::min(rows, r0 + blk);
    for (int64_t c0 = 0; c0 < cols; c0 += blk) {
      const int64_t c1 = std::min(cols, c0 + blk);
      for (int64_t r = r0; r < r1; ++r)
        for (int64_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T. Dot-product reductions do not vectorize
// under strict FP semantics, so B is transposed once and the axpy kernel
// does the work; the k-summation order is unchanged.
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k, bool accumulate) {
  std::vector<T> bt(static_cast<size_t>(k) * n);
  transpose_mat(b, bt.data(), n, k);
  gemm_nn(a, bt.data(), c, m, n, k, accumulate);
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k, bool accumulate) {
  parallel_for(m, 16, [=](int64_t r0, int64_t r1) {
    for (int64_t i = r0; i < r1; ++i) {
      T* ci = c + i * n;
      if (!accumulate) {
        for (int64_t j = 0; j < n; ++j) ci[j] = T(0);
      }
      for (int64_t p = 0; p < k; ++p) {
        const T aik = a[p * m + i];
        if (aik == T(0)) continue;
        const T* bp = b + p * n;
        for (int64_t j = 0; j < n; ++j) ci[j] += aik * bp[j];
      }
    }
  });
}

// Batched GEMM over equally-shaped slices, parallel across (batch * rows)
// so small attention slices still spread over the pool.
template <typename T>
void bgemm_nn(const T* a, const T* b, T* c, int64_t batch, int64_t m, int64_t n, int64_t k,
              bool accumulate) {
  parallel_for(batch * m, 16, [=](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      const int64_t bi = r / m, i = r % m;
      const T* ai = a + (bi * m + i) * k;
      const T* bb = b + bi * k * n;
      T* ci = c + r * n;
      if (!accumulate) {
        for (int64_t j = 0; j < n; ++j) ci[j] = T(0);
      }
      for (int64_t p = 0; p < k; ++p) {
        const T aik = ai[p];
        if (aik == T(0)) continue;
        const T* bp = bb + p * n;
        for (int64_t j = 0; j < n; ++j) ci[j] += aik * bp[j];
      }
    }
  });
}

// C[b,M,N] (+)= A[b,M,K] * B[b,N,K]^T; slices transposed up front, then the
// nn kernel runs (same per-element summation order as a direct dot).
template <typename T>
void bgemm_nt(const T* a, const T* b, T* c, int64_t batch, int64_t m, int64_t n, int64_t k,
              bool accumulate) {
  std::vector<T> bt(static_cast<size_t>(batch) * k * n);
  parallel_for(batch, 1, [&](int64_t b0, int64_t b1) {
    for (int64_t bi = b0; bi < b1; ++bi) {
      transpose_mat(b + bi * n * k, bt.data() + bi * k * n, n, k);
    }
  });
  bgemm_nn(a, bt.data(), c, batch, m, n, k, accumulate);
}

// C[b,M,N] (+)= A[b,K,M]^T * B[b,K,N]
template <typename T>
void bgemm_tn(const T* a, const T* b, T* c, int64_t batch, int64_t m, int64_t n, int64_t k,
              bool accumulate) {
  parallel_for(batch * m, 16, [=](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      const int64_t bi = r / m, i = r % m;
      const T* ab = a + bi * k * m;
      const T* bb = b + bi * k * n;
      T* ci = c + r * n;
      if (!accumulate) {
        for (int64_t j = 0; j < n; ++j) ci[j] = T(0);
      }
      for (int64_t p = 0; p < k; ++p) {
        const T aik = ab[p * m + i];
        if (aik == T(0)) continue;
        const T* bp = bb + p * n;
        for (int64_t j = 0; j < n; ++j) ci[j] += aik * bp[j];
      }
    }
  });
}

// Unfold [C,H,W] into [C*k*k, OH*OW] for a square kernel. Out-of-bounds
// taps are zero (zero padding). Channels write disjoint row blocks, so it
// parallelizes cleanly.
template <typename T>
void im2col(const T* x, int64_t c, int64_t h, int64_t w, int64_t k, int64_t stride, int64_t pad,
            int64_t oh, int64_t ow, T* col) {
  const int64_t p = oh * ow;
  parallel_for(c, 4, [=](int64_t c0, int64_t c1) {
  for (int64_t ch = c0; ch < c1; ++ch) {
    for (int64_t kh = 0; kh < k; ++kh) {
      for (int64_t kw = 0; kw < k; ++kw) {
        T* row = col + ((ch * k + kh) * k + kw) * p;
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t iy = oy * stride + kh - pad;
          if (iy < 0 || iy >= h) {
            for (int64_t ox = 0; ox < ow; ++ox) row[oy * ow + ox] = T(0);
            continue;
          }
          const T* xrow = x + (ch * h + iy) * w;
          for (int64_t ox = 0; ox < ow; ++ox) {
            const int64_t ix = ox * stride + kw - pad;
            row[oy * ow + ox] = (ix < 0 || ix >= w) ? T(0) : xrow[ix];
          }
        }
      }
    }
  }
  });
}

// Adjoint of im2col: scatter-add columns back into [C,H,W]. Channel c of x
// only receives from channel c's rows, so the channel loop parallelizes.
template <typename T>
void col2im(const T* col, int64_t c, int64_t h, int64_t w, int64_t k, int64_t stride, int64_t pad,
            int64_t oh, int64_t ow, T* x) {
  const int64_t p = oh * ow;
  parallel_for(c, 4, [=](int64_t c0, int64_t c1) {
  for (int64_t ch = c0; ch < c1; ++ch) {
    for (int64_t kh = 0; kh < k; ++kh) {
      for (int64_t kw = 0; kw < k; ++kw) {
        const T* row = col + ((ch * k + kh) * k + kw) * p;
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t iy = oy * stride + kh - pad;
          if (iy < 0 || iy >= h) continue;
          T* xrow = x + (ch * h + iy) * w;
          for (int64_t ox = 0; ox < ow; ++ox) {
            const int64_t ix = ox * stride + kw - pad;
            if (ix >= 0 && ix < w) xrow[ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
  });
}

}  // namespace stripformer::detail
