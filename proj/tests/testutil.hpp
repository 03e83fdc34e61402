// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "stripformer/stripformer.hpp"

namespace testutil {

using stripformer::ProjectionWeights;
using stripformer::Rng;
using stripformer::Tensor;

// Independently written multi-head attention over the W pixel tokens of a
// [1,D,1,W] map, raw double loops only. Oracle for the strip-attention
// equivalence checks; shares nothing with the library's op stack.
inline std::vector<double> naive_mha_row(const Tensor<double>& x, const ProjectionWeights<double>& w,
                                         int64_t heads) {
  const int64_t d_model = x.extent(1), width = x.extent(3);
  const int64_t d_head = d_model / heads;
  auto xd = x.data();
  auto wq = w.wq.data(), wk = w.wk.data(), wv = w.wv.data();
  auto proj = [&](std::span<const double> m, int64_t token, int64_t out_c) {
    double acc = 0.0;
    for (int64_t c = 0; c < d_model; ++c) acc += m[out_c * d_model + c] * xd[c * width + token];
    return acc;
  };
  std::vector<double> out(static_cast<size_t>(d_model * width), 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t i = 0; i < width; ++i) {
      // logits against every key token
      std::vector<double> logits(width);
      for (int64_t j = 0; j < width; ++j) {
        double dot = 0.0;
        for (int64_t c = 0; c < d_head; ++c) {
          dot += proj(wq, i, h * d_head + c) * proj(wk, j, h * d_head + c);
        }
        logits[j] = dot * scale;
      }
      double mx = logits[0];
      for (double v : logits) mx = std::max(mx, v);
      double denom = 0.0;
      for (double& v : logits) {
        v = std::exp(v - mx);
        denom += v;
      }
      for (int64_t c = 0; c < d_head; ++c) {
        double acc = 0.0;
        for (int64_t j = 0; j < width; ++j) acc += (logits[j] / denom) * proj(wv, j, h * d_head + c);
        out[(h * d_head + c) * width + i] = acc;
      }
    }
  }
  return out;
}

// Direct windowed SSIM: literal 11x11 loops per window position, no
// separable filtering. Oracle for the library implementation.
template <typename T>
double direct_ssim(const Tensor<T>& r, const Tensor<T>& s) {
  const int64_t w = r.extent(r.rank() - 1);
  const int64_t h = r.extent(r.rank() - 2);
  const int64_t channels = r.numel() / (h * w);
  constexpr double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double g[11];
  double gsum = 0.0;
  for (int i = 0; i < 11; ++i) {
    const double x = i - 5;
    g[i] = std::exp(-x * x / (2.0 * sigma * sigma));
    gsum += g[i];
  }
  for (double& v : g) v /= gsum;
  auto rd = r.data(), sd = s.data();
  double total = 0.0;
  int64_t count = 0;
  for (int64_t ch = 0; ch < channels; ++ch) {
    const int64_t base = ch * h * w;
    for (int64_t y = 0; y + 11 <= h; ++y) {
      for (int64_t x = 0; x + 11 <= w; ++x) {
        double mu_a = 0, mu_b = 0, m_aa = 0, m_bb = 0, m_ab = 0;
        for (int64_t wy = 0; wy < 11; ++wy) {
          for (int64_t wx = 0; wx < 11; ++wx) {
            const double wgt = g[wy] * g[wx];
            const double a = rd[base + (y + wy) * w + x + wx];
            const double b = sd[base + (y + wy) * w + x + wx];
            mu_a += wgt * a;
            mu_b += wgt * b;
            m_aa += wgt * a * a;
            m_bb += wgt * b * b;
            m_ab += wgt * a * b;
          }
        }
        const double va = m_aa - mu_a * mu_a, vb = m_bb - mu_b * mu_b;
        const double cov = m_ab - mu_a * mu_b;
        total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                 ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0.0;
  auto ad = a.data(), bd = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(double(ad[i]) - double(bd[i])));
  }
  return m;
}

template <typename T>
bool exactly_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  auto ad = a.data(), bd = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (ad[i] != bd[i]) return false;
  }
  return true;
}

}  // namespace testutil
