// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "stripformer/conv.hpp"
#include "stripformer/ops.hpp"

namespace stripformer {

template <typename T>
struct LossWeights {
  T lambda1 = T(0.05);
  T lambda2 = T(0.0005);
  T charbonnier_eps = T(1e-3);

  void validate() const {
    if (charbonnier_eps <= T(0)) throw ConfigError("loss: charbonnier_eps must be positive");
    if (lambda1 < T(0) || lambda2 < T(0)) throw ConfigError("loss: lambda weights must be >= 0");
  }
};

// Smooth L1: mean over elements of sqrt((r-s)^2 + eps^2). Equals eps exactly
// when the images coincide.
template <typename T>
Tensor<T> charbonnier(const Tensor<T>& r, const Tensor<T>& s, T eps) {
  detail::check_same_shape(r, s, "charbonnier");
  if (eps <= T(0)) throw ConfigError("charbonnier: eps must be positive");
  Tensor<T> d = sub(r, s);
  return mean_all(sqrt(add_scalar(mul(d, d), eps * eps)));
}

namespace detail {

// Per-channel 3x3 Laplacian under reflection padding; the zero-sum kernel
// then kills global offsets everywhere, borders included.
template <typename T>
Tensor<T> laplacian(const Tensor<T>& x) {
  const int64_t c = x.extent(1);
  Tensor<T> kernel({c, 1, 3, 3});
  auto kd = kernel.data_mut();
  static constexpr double taps[9] = {0, 1, 0, 1, -4, 1, 0, 1, 0};
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int i = 0; i < 9; ++i) kd[ch * 9 + i] = static_cast<T>(taps[i]);
  }
  return depthwise_conv2d(reflect_pad2d(x, 1, 1, 1, 1), kernel, 0);
}

}  // namespace detail

template <typename T>
Tensor<T> edge_loss(const Tensor<T>& r, const Tensor<T>& s, T eps) {
  detail::check_same_shape(r, s, "edge_loss");
  if (r.rank() != 4 || r.extent(2) < 3 || r.extent(3) < 3) {
    throw ShapeError("edge_loss: needs NCHW with spatial dims >= 3, got " + shape_str(r.shape()));
  }
  return charbonnier(detail::laplacian(r), detail::laplacian(s), eps);
}

// Fixed random feature embedding standing in for a pretrained perceptual
// network: three stages of conv3x3/ReLU pairs (widths 16/32/64) with 2x
// average pooling between stages; the output is the stage-3 pre-pool map.
// Same seed, same features, bit for bit. Weights never train, but gradients
// flow through to the input image.
template <typename T>
class FeatureExtractor {
 public:
  static constexpr uint64_t kDefaultSeed = 2206;
  static constexpr int64_t kWidths[3] = {16, 32, 64};

  explicit FeatureExtractor(uint64_t seed = kDefaultSeed) : seed_(seed) {
    Rng rng(seed);
    int64_t c_in = 3;
    for (int s = 0; s < 3; ++s) {
      const int64_t w = kWidths[s];
      weights_.emplace_back(layer_name(s, "a"), init_conv(w, c_in, rng));
      weights_.emplace_back(layer_name(s, "b"), init_conv(w, w, rng));
      c_in = w;
    }
  }

  uint64_t seed() const { return seed_; }

  Tensor<T> operator()(const Tensor<T>& img) const {
    if (img.rank() != 4) {
      throw ShapeError("feature extractor: expected NCHW, got " + shape_str(img.shape()));
    }
    if (img.extent(2) % 4 != 0 || img.extent(3) % 4 != 0) {
      throw ShapeError("feature extractor: spatial dims must be divisible by 4, got " +
                       shape_str(img.shape()));
    }
    Tensor<T> y = img;
    for (int s = 0; s < 3; ++s) {
      y = relu(conv2d(y, weights_[2 * s].second, 1, 1));
      y = relu(conv2d(y, weights_[2 * s + 1].second, 1, 1));
      if (s < 2) y = avg_pool2d(y, 2);
    }
    return y;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& weights() const { return weights_; }
  std::vector<std::pair<std::string, Tensor<T>>>& weights_mut() { return weights_; }

 private:
  static std::string layer_name(int stage, const char* which) {
    return "psi.s" + std::to_string(stage) + "." + which + ".w";
  }

  static Tensor<T> init_conv(int64_t out_c, int64_t in_c, Rng& rng) {
    return Tensor<T>::trunc_normal({out_c, in_c, 3, 3}, rng, std::sqrt(2.0 / double(in_c * 9)));
  }

  uint64_t seed_;
  std::vector<std::pair<std::string, Tensor<T>>> weights_;
};

inline constexpr double kContrastiveDelta = 1e-7;

// Ratio loss: mean-L1 feature distance to the sharp target over distance to
// the blurred input (denominator guarded). Pulls the restoration toward the
// target and away from its own input in the fixed feature space.
template <typename T, typename Psi>
Tensor<T> contrastive(const Tensor<T>& x_blur, const Tensor<T>& r, const Tensor<T>& s,
                      const Psi& psi) {
  detail::check_same_shape(x_blur, r, "contrastive");
  detail::check_same_shape(r, s, "contrastive");
  Tensor<T> fr = psi(r);
  Tensor<T> numerator = mean_all(abs(sub(psi(s), fr)));
  Tensor<T> denominator = add_scalar(mean_all(abs(sub(psi(x_blur), fr))), T(kContrastiveDelta));
  return div(numerator, denominator);
}

template <typename T>
struct LossBreakdown {
  Tensor<T> total, l_char, l_edge, l_con;
};

template <typename T, typename Psi>
LossBreakdown<T> total_loss_parts(const Tensor<T>& x, const Tensor<T>& r, const Tensor<T>& s,
                                  const LossWeights<T>& w, const Psi& psi) {
  w.validate();
  LossBreakdown<T> parts;
  parts.l_char = charbonnier(r, s, w.charbonnier_eps);
  parts.l_edge = edge_loss(r, s, w.charbonnier_eps);
  parts.l_con = w.lambda2 != T(0) ? contrastive(x, r, s, psi) : Tensor<T>::scalar(T(0));
  parts.total =
      add(add(parts.l_char, mul_scalar(parts.l_edge, w.lambda1)), mul_scalar(parts.l_con, w.lambda2));
  return parts;
}

template <typename T, typename Psi>
Tensor<T> total_loss(const Tensor<T>& x, const Tensor<T>& r, const Tensor<T>& s,
                     const LossWeights<T>& w, const Psi& psi) {
  return total_loss_parts(x, r, s, w, psi).total;
}

}  // namespace stripformer
