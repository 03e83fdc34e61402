// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "stripformer/tensor.hpp"

namespace stripformer {

template <typename T>
double mean_squared_error(const Tensor<T>& r, const Tensor<T>& s) {
  if (r.shape() != s.shape()) {
    throw ShapeError("mse: shape mismatch " + shape_str(r.shape()) + " vs " + shape_str(s.shape()));
  }
  double acc = 0.0;
  auto rd = r.data(), sd = s.data();
  for (int64_t i = 0; i < r.numel(); ++i) {
    const double d = double(rd[i]) - double(sd[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(r.numel());
}

// Peak signal-to-noise ratio for images in [0,1]; identical images report
// +infinity.
template <typename T>
double psnr(const Tensor<T>& r, const Tensor<T>& s) {
  const double m = mean_squared_error(r, s);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

namespace detail {

inline std::vector<double> gaussian_window_11() {
  constexpr double sigma = 1.5;
  std::vector<double> g(11);
  double sum = 0.0;
  for (int i = 0; i < 11; ++i) {
    const double x = i - 5;
    g[i] = std::exp(-x * x / (2.0 * sigma * sigma));
    sum += g[i];
  }
  for (auto& v : g) v /= sum;
  return g;
}

// Valid-mode separable filtering: rows then columns.
inline void filter_valid(const std::vector<double>& in, int64_t h, int64_t w,
                         const std::vector<double>& g, std::vector<double>& out) {
  const int64_t k = static_cast<int64_t>(g.size());
  const int64_t ow = w - k + 1, oh = h - k + 1;
  std::vector<double> rows(static_cast<size_t>(h * ow));
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int64_t i = 0; i < k; ++i) acc += g[i] * in[y * w + x + i];
      rows[y * ow + x] = acc;
    }
  }
  out.assign(static_cast<size_t>(oh * ow), 0.0);
  for (int64_t y = 0; y < oh; ++y) {
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int64_t i = 0; i < k; ++i) acc += g[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  }
}

}  // namespace detail

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// dynamic range 1. Channels are scored independently and averaged.
template <typename T>
double ssim(const Tensor<T>& r, const Tensor<T>& s) {
  if (r.shape() != s.shape()) {
    throw ShapeError("ssim: shape mismatch " + shape_str(r.shape()) + " vs " + shape_str(s.shape()));
  }
  if (r.rank() < 2) throw UsageError("ssim: needs at least 2 spatial dims");
  const int64_t w = r.extent(r.rank() - 1);
  const int64_t h = r.extent(r.rank() - 2);
  const int64_t channels = r.numel() / (h * w);
  if (h < 11 || w < 11) throw UsageError("ssim: image smaller than the 11x11 window");

  const auto g = detail::gaussian_window_11();
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  auto rd = r.data(), sd = s.data();

  double total = 0.0;
  int64_t count = 0;
  std::vector<double> a(static_cast<size_t>(h * w)), b(static_cast<size_t>(h * w));
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  std::vector<double> mu_a, mu_b, m_aa, m_bb, m_ab;
  for (int64_t ch = 0; ch < channels; ++ch) {
    const int64_t base = ch * h * w;
    for (int64_t i = 0; i < h * w; ++i) {
      a[i] = rd[base + i];
      b[i] = sd[base + i];
      aa[i] = a[i] * a[i];
      bb[i] = b[i] * b[i];
      ab[i] = a[i] * b[i];
    }
    detail::filter_valid(a, h, w, g, mu_a);
    detail::filter_valid(b, h, w, g, mu_b);
    detail::filter_valid(aa, h, w, g, m_aa);
    detail::filter_valid(bb, h, w, g, m_bb);
    detail::filter_valid(ab, h, w, g, m_ab);
    for (size_t i = 0; i < mu_a.size(); ++i) {
      const double va = m_aa[i] - mu_a[i] * mu_a[i];
      const double vb = m_bb[i] - mu_b[i] * mu_b[i];
      const double cov = m_ab[i] - mu_a[i] * mu_b[i];
      const double num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
      const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
      total += num / den;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace stripformer
