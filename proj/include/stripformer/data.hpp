// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "stripformer/conv.hpp"

namespace stripformer {

// A training sample: blurred observation and sharp target, both [3,H,W] in
// [0,1], plus a provenance note (synthesis parameters or file paths).
template <typename T>
struct ImagePair {
  Tensor<T> blurred, sharp;
  std::string provenance;
};

// Linear motion point-spread function: a unit-mass segment of the given
// pixel length and angle, rasterized by bilinear splatting and normalized.
template <typename T>
Tensor<T> motion_kernel(int64_t length, double theta) {
  if (length < 1) throw UsageError("motion_kernel: length must be >= 1");
  const int64_t size = (length % 2 == 1) ? length : length + 1;
  Tensor<T> kernel({size, size});
  auto kd = kernel.data_mut();
  const double c = (size - 1) / 2.0;
  const double dx = std::cos(theta), dy = std::sin(theta);
  for (int64_t i = 0; i < length; ++i) {
    const double t = i - (length - 1) / 2.0;
    const double px = c + t * dx, py = c + t * dy;
    const int64_t x0 = static_cast<int64_t>(std::floor(px));
    const int64_t y0 = static_cast<int64_t>(std::floor(py));
    const double fx = px - x0, fy = py - y0;
    auto splat = [&](int64_t x, int64_t y, double wgt) {
      if (x >= 0 && x < size && y >= 0 && y < size) kd[y * size + x] += static_cast<T>(wgt);
    };
    splat(x0, y0, (1 - fx) * (1 - fy));
    splat(x0 + 1, y0, fx * (1 - fy));
    splat(x0, y0 + 1, (1 - fx) * fy);
    splat(x0 + 1, y0 + 1, fx * fy);
  }
  T sum = T(0);
  for (T v : kd) sum += v;
  for (T& v : kd) v /= sum;
  return kernel;
}

// Convolve a [3,H,W] image with a motion kernel under reflection padding,
// optionally add Gaussian noise, clip to [0,1].
template <typename T>
ImagePair<T> synth_blur(const Tensor<T>& sharp, int64_t length, double theta, double noise_sigma,
                        Rng& rng) {
  if (sharp.rank() != 3 || sharp.extent(0) != 3) {
    throw ShapeError("synth_blur: expected [3,H,W], got " + shape_str(sharp.shape()));
  }
  const int64_t h = sharp.extent(1), w = sharp.extent(2);
  if (length < 1 || length > std::min(h, w) / 2) {
    throw UsageError("synth_blur: kernel length " + std::to_string(length) + " outside [1, " +
                     std::to_string(std::min(h, w) / 2) + "]");
  }
  Tensor<T> kern = motion_kernel<T>(length, theta);
  const int64_t ks = kern.extent(0);
  Tensor<T> dw({3, 1, ks, ks});
  for (int64_t c = 0; c < 3; ++c) {
    std::copy(kern.data().begin(), kern.data().end(), dw.data_mut().begin() + c * ks * ks);
  }
  const int64_t pad = (ks - 1) / 2;
  Tensor<T> x = reshape(sharp, {1, 3, h, w});
  Tensor<T> blurred = depthwise_conv2d(reflect_pad2d(x, pad, pad, pad, pad), dw, 0);
  auto bd = blurred.data_mut();
  if (noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, noise_sigma);
    for (auto& v : bd) v += static_cast<T>(noise(rng));
  }
  for (auto& v : bd) v = std::clamp(v, T(0), T(1));
  ImagePair<T> pair;
  pair.blurred = reshape(blurred, {3, h, w});
  pair.sharp = sharp.clone();
  pair.provenance = "synthetic(L=" + std::to_string(length) + ",theta=" + std::to_string(theta) +
                    ",sigma=" + std::to_string(noise_sigma) + ")";
  return pair;
}

// One sampled augmentation: crop window, horizontal flip, quarter turns.
struct AugmentDraw {
  int64_t x0 = 0, y0 = 0;
  bool hflip = false;
  int quarter_turns = 0;
};

inline AugmentDraw draw_augmentation(Rng& rng, int64_t h, int64_t w, int64_t crop) {
  AugmentDraw d;
  d.y0 = (h > crop) ? static_cast<int64_t>(rng() % uint64_t(h - crop + 1)) : 0;
  d.x0 = (w > crop) ? static_cast<int64_t>(rng() % uint64_t(w - crop + 1)) : 0;
  d.hflip = (rng() & 1) != 0;
  d.quarter_turns = static_cast<int>(rng() % 4);
  return d;
}

namespace detail {

template <typename T>
Tensor<T> transform_image(const Tensor<T>& img, int64_t crop, const AugmentDraw& d) {
  const int64_t c = img.extent(0), w = img.extent(2);
  Tensor<T> out({c, crop, crop});
  auto id = img.data();
  auto od = out.data_mut();
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t y = 0; y < crop; ++y) {
      for (int64_t x = 0; x < crop; ++x) {
        // output = rot90^k(hflip(crop)); walk the inverse transform
        int64_t sy = y, sx = x;
        for (int t = 0; t < d.quarter_turns; ++t) {
          const int64_t ny = sx;
          const int64_t nx = crop - 1 - sy;
          sy = ny;
          sx = nx;
        }
        if (d.hflip) sx = crop - 1 - sx;
        od[(ch * crop + y) * crop + x] = id[(ch * img.extent(1) + d.y0 + sy) * w + d.x0 + sx];
      }
    }
  }
  return out;
}

}  // namespace detail

// Apply the same crop/flip/rotation to both halves of a pair.
template <typename T>
ImagePair<T> apply_augmentation(const ImagePair<T>& pair, int64_t crop, const AugmentDraw& d) {
  ImagePair<T> out;
  out.blurred = detail::transform_image(pair.blurred, crop, d);
  out.sharp = detail::transform_image(pair.sharp, crop, d);
  out.provenance = pair.provenance;
  return out;
}

template <typename T>
ImagePair<T> augment(const ImagePair<T>& pair, int64_t crop, Rng& rng) {
  const int64_t h = pair.sharp.extent(1), w = pair.sharp.extent(2);
  if (crop > h || crop > w) {
    throw UsageError("augment: crop " + std::to_string(crop) + " larger than image " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  if (crop % 4 != 0) throw UsageError("augment: crop must be divisible by 4");
  return apply_augmentation(pair, crop, draw_augmentation(rng, h, w, crop));
}

// Procedural sharp image: gradient background, filled triangles, and
// stroke segments. Structured content with edges at many orientations.
template <typename T>
Tensor<T> random_sharp_image(int64_t h, int64_t w, Rng& rng) {
  Tensor<T> img({3, h, w});
  auto d = img.data_mut();
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  const double gx = uni(rng) * 2 - 1, gy = uni(rng) * 2 - 1;
  double base[3], tip[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = uni(rng);
    tip[c] = uni(rng);
  }
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const double t = 0.5 + 0.5 * (gx * (2.0 * x / w - 1) + gy * (2.0 * y / h - 1));
      for (int c = 0; c < 3; ++c) {
        d[(c * h + y) * w + x] = static_cast<T>(base[c] + (tip[c] - base[c]) * t);
      }
    }
  }

  const int n_tris = 3 + static_cast<int>(rng() % 5);
  for (int s = 0; s < n_tris; ++s) {
    double px[3], py[3], color[3];
    for (int i = 0; i < 3; ++i) {
      px[i] = uni(rng) * w;
      py[i] = uni(rng) * h;
    }
    for (int c = 0; c < 3; ++c) color[c] = uni(rng);
    auto edge = [&](int i, int j, double x, double y) {
      return (px[j] - px[i]) * (y - py[i]) - (py[j] - py[i]) * (x - px[i]);
    };
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const double e0 = edge(0, 1, x, y), e1 = edge(1, 2, x, y), e2 = edge(2, 0, x, y);
        const bool inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
        if (inside) {
          for (int c = 0; c < 3; ++c) d[(c * h + y) * w + x] = static_cast<T>(color[c]);
        }
      }
    }
  }

  const int n_strokes = 2 + static_cast<int>(rng() % 4);
  for (int s = 0; s < n_strokes; ++s) {
    const double ax = uni(rng) * w, ay = uni(rng) * h;
    const double bx = uni(rng) * w, by = uni(rng) * h;
    const double thick = 0.8 + uni(rng) * 1.6;
    double color[3];
    for (int c = 0; c < 3; ++c) color[c] = uni(rng);
    const double vx = bx - ax, vy = by - ay;
    const double len2 = std::max(vx * vx + vy * vy, 1e-9);
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const double t = std::clamp(((x - ax) * vx + (y - ay) * vy) / len2, 0.0, 1.0);
        const double dx = x - (ax + t * vx), dy = y - (ay + t * vy);
        if (dx * dx + dy * dy <= thick * thick) {
          for (int c = 0; c < 3; ++c) d[(c * h + y) * w + x] = static_cast<T>(color[c]);
        }
      }
    }
  }

  for (auto& v : d) v = std::clamp(v, T(0), T(1));
  return img;
}

}  // namespace stripformer
