// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "stripformer/attention.hpp"

namespace stripformer {

// Desk-scale architecture hyperparameters. Attention runs at the 1/2 scale
// (c2 wide) and the 1/4 scale (c3 wide); heads must divide both C/2 widths.
struct StripformerConfig {
  int64_t c1 = 32;               // width after the first embedding block
  int64_t c2 = 64;               // width at 1/2 resolution
  int64_t c3 = 128;              // bottleneck width at 1/4 resolution
  int64_t blocks_per_scale = 2;  // (Intra, Inter) pairs per attention scale
  int64_t heads = 4;
  int64_t mlp_ratio = 4;

  void validate() const {
    if (c1 <= 0 || c2 <= 0 || c3 <= 0) throw ConfigError("model: channel widths must be positive");
    if (blocks_per_scale < 1) throw ConfigError("model: blocks_per_scale must be >= 1");
    if (mlp_ratio < 1) throw ConfigError("model: mlp_ratio must be >= 1");
    AttentionConfig{c2, heads}.validate();
    AttentionConfig{c3, heads}.validate();
  }

  bool operator==(const StripformerConfig&) const = default;
};

template <typename T>
struct ResidualBlockParams {
  Tensor<T> w1, b1, w2, b2;  // two 3x3 convs
};

// FEB: one 2x2 stride-2 embedding conv, then three residual blocks.
template <typename T>
struct FebParams {
  Tensor<T> down_w, down_b;
  std::array<ResidualBlockParams<T>, 3> blocks;
};

template <typename T>
struct StripformerParams {
  FebParams<T> feb1, feb2;
  Tensor<T> neck_w, neck_b;  // 3x3 conv c2 -> c3 at 1/4 scale
  std::vector<StripBlockParams<T>> bottleneck;  // interlaced Intra/Inter at c3
  Tensor<T> up1_w, up1_b;                       // 2x2 stride-2 transposed conv c3 -> c2
  Tensor<T> merge1_w, merge1_b;                 // 1x1 (c2+c1) -> c2 after skip concat
  std::vector<StripBlockParams<T>> mid;         // interlaced Intra/Inter at c2
  Tensor<T> up2_w, up2_b;                       // 2x2 stride-2 transposed conv c2 -> c1
  Tensor<T> merge2_w, merge2_b;                 // 1x1 (c1+3) -> c1 after image concat
  std::array<ResidualBlockParams<T>, 2> tail;
  Tensor<T> final_w, final_b;  // 3x3 c1 -> 3, predicts the residual image
};

namespace detail {

template <typename T>
Tensor<T> conv_weight_init(Shape shape, Rng& rng) {
  const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
  return Tensor<T>::trunc_normal(std::move(shape), rng, std::sqrt(2.0 / fan_in)).set_requires_grad();
}

}  // namespace detail

template <typename T>
ResidualBlockParams<T> make_residual_block_params(int64_t c, Rng& rng) {
  ResidualBlockParams<T> p;
  p.w1 = detail::conv_weight_init<T>({c, c, 3, 3}, rng);
  p.b1 = Tensor<T>::zeros({c}).set_requires_grad();
  p.w2 = detail::conv_weight_init<T>({c, c, 3, 3}, rng);
  p.b2 = Tensor<T>::zeros({c}).set_requires_grad();
  return p;
}

template <typename T>
FebParams<T> make_feb_params(int64_t c_in, int64_t c_out, Rng& rng) {
  FebParams<T> p;
  p.down_w = detail::conv_weight_init<T>({c_out, c_in, 2, 2}, rng);
  p.down_b = Tensor<T>::zeros({c_out}).set_requires_grad();
  for (auto& rb : p.blocks) rb = make_residual_block_params<T>(c_out, rng);
  return p;
}

template <typename T>
StripformerParams<T> init_params(const StripformerConfig& cfg, Rng& rng) {
  cfg.validate();
  StripformerParams<T> p;
  p.feb1 = make_feb_params<T>(3, cfg.c1, rng);
  p.feb2 = make_feb_params<T>(cfg.c1, cfg.c2, rng);
  p.neck_w = detail::conv_weight_init<T>({cfg.c3, cfg.c2, 3, 3}, rng);
  p.neck_b = Tensor<T>::zeros({cfg.c3}).set_requires_grad();
  for (int64_t i = 0; i < 2 * cfg.blocks_per_scale; ++i) {
    p.bottleneck.push_back(make_strip_block_params<T>(cfg.c3, cfg.heads, cfg.mlp_ratio, rng));
  }
  // transposed conv weight layout is [C_in, C_out, k, k]
  p.up1_w = Tensor<T>::trunc_normal({cfg.c3, cfg.c2, 2, 2}, rng, std::sqrt(2.0 / double(cfg.c3 * 4)))
                .set_requires_grad();
  p.up1_b = Tensor<T>::zeros({cfg.c2}).set_requires_grad();
  p.merge1_w = detail::conv_weight_init<T>({cfg.c2, cfg.c2 + cfg.c1, 1, 1}, rng);
  p.merge1_b = Tensor<T>::zeros({cfg.c2}).set_requires_grad();
  for (int64_t i = 0; i < 2 * cfg.blocks_per_scale; ++i) {
    p.mid.push_back(make_strip_block_params<T>(cfg.c2, cfg.heads, cfg.mlp_ratio, rng));
  }
  p.up2_w = Tensor<T>::trunc_normal({cfg.c2, cfg.c1, 2, 2}, rng, std::sqrt(2.0 / double(cfg.c2 * 4)))
                .set_requires_grad();
  p.up2_b = Tensor<T>::zeros({cfg.c1}).set_requires_grad();
  p.merge2_w = detail::conv_weight_init<T>({cfg.c1, cfg.c1 + 3, 1, 1}, rng);
  p.merge2_b = Tensor<T>::zeros({cfg.c1}).set_requires_grad();
  for (auto& rb : p.tail) rb = make_residual_block_params<T>(cfg.c1, rng);
  // near-identity start: the predicted correction begins close to zero
  p.final_w = Tensor<T>::trunc_normal({3, cfg.c1, 3, 3}, rng, 1e-3).set_requires_grad();
  p.final_b = Tensor<T>::zeros({3}).set_requires_grad();
  return p;
}

// ---------------------------------------------------------------------------
// Parameter enumeration. Order is declaration order and stable across runs;
// checkpoints and the optimizer both key off these names.

namespace detail {

template <typename T, typename F>
void visit_residual_block(const std::string& prefix, ResidualBlockParams<T>& p, F&& f) {
  f(prefix + ".w1", p.w1);
  f(prefix + ".b1", p.b1);
  f(prefix + ".w2", p.w2);
  f(prefix + ".b2", p.b2);
}

template <typename T, typename F>
void visit_feb(const std::string& prefix, FebParams<T>& p, F&& f) {
  f(prefix + ".down.w", p.down_w);
  f(prefix + ".down.b", p.down_b);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    visit_residual_block(prefix + ".rb" + std::to_string(i), p.blocks[i], f);
  }
}

template <typename T, typename F>
void visit_strip_block(const std::string& prefix, StripBlockParams<T>& p, F&& f) {
  f(prefix + ".norm.gamma", p.norm_gamma);
  f(prefix + ".norm.beta", p.norm_beta);
  f(prefix + ".split.w", p.split_w);
  f(prefix + ".split.b", p.split_b);
  f(prefix + ".h.wq", p.h.wq);
  f(prefix + ".h.wk", p.h.wk);
  f(prefix + ".h.wv", p.h.wv);
  f(prefix + ".v.wq", p.v.wq);
  f(prefix + ".v.wk", p.v.wk);
  f(prefix + ".v.wv", p.v.wv);
  f(prefix + ".out.w", p.out_w);
  f(prefix + ".out.b", p.out_b);
  f(prefix + ".mlp.norm.gamma", p.mlp.norm_gamma);
  f(prefix + ".mlp.norm.beta", p.mlp.norm_beta);
  f(prefix + ".mlp.fc1.w", p.mlp.fc1_w);
  f(prefix + ".mlp.fc1.b", p.mlp.fc1_b);
  f(prefix + ".mlp.fc2.w", p.mlp.fc2_w);
  f(prefix + ".mlp.fc2.b", p.mlp.fc2_b);
  f(prefix + ".mlp.cpe.w", p.mlp.cpe_w);
}

}  // namespace detail

template <typename T, typename F>
void visit_params(StripformerParams<T>& p, F&& f) {
  detail::visit_feb("feb1", p.feb1, f);
  detail::visit_feb("feb2", p.feb2, f);
  f("neck.w", p.neck_w);
  f("neck.b", p.neck_b);
  for (size_t i = 0; i < p.bottleneck.size(); ++i) {
    detail::visit_strip_block("enc" + std::to_string(i), p.bottleneck[i], f);
  }
  f("up1.w", p.up1_w);
  f("up1.b", p.up1_b);
  f("merge1.w", p.merge1_w);
  f("merge1.b", p.merge1_b);
  for (size_t i = 0; i < p.mid.size(); ++i) {
    detail::visit_strip_block("mid" + std::to_string(i), p.mid[i], f);
  }
  f("up2.w", p.up2_w);
  f("up2.b", p.up2_b);
  f("merge2.w", p.merge2_w);
  f("merge2.b", p.merge2_b);
  for (size_t i = 0; i < p.tail.size(); ++i) {
    detail::visit_residual_block("tail" + std::to_string(i), p.tail[i], f);
  }
  f("final.w", p.final_w);
  f("final.b", p.final_b);
}

template <typename T>
using ParamRegistry = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
ParamRegistry<T> collect_params(StripformerParams<T>& p) {
  ParamRegistry<T> out;
  visit_params(p, [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

template <typename T>
int64_t param_count(StripformerParams<T>& p) {
  int64_t n = 0;
  visit_params(p, [&](const std::string&, Tensor<T>& t) { n += t.numel(); });
  return n;
}

// ---------------------------------------------------------------------------
// Blocks

template <typename T>
Tensor<T> residual_block(const Tensor<T>& x, const ResidualBlockParams<T>& p) {
  Tensor<T> y = conv2d(x, p.w1, p.b1, 1, 1);
  y = relu(y);
  y = conv2d(y, p.w2, p.b2, 1, 1);
  return add(x, y);
}

// Feature embedding block: one stride-2 conv halves the resolution, then
// three residual blocks refine.
template <typename T>
Tensor<T> feb(const Tensor<T>& x, const FebParams<T>& p) {
  if (x.rank() != 4) throw ShapeError("feb: expected NCHW, got " + shape_str(x.shape()));
  if (x.extent(2) % 2 != 0 || x.extent(3) % 2 != 0) {
    throw ShapeError("feb: spatial dims must be even, got " + shape_str(x.shape()) +
                     " (caller must pad)");
  }
  Tensor<T> y = conv2d(x, p.down_w, p.down_b, 2, 0);
  for (const auto& rb : p.blocks) y = residual_block(y, rb);
  return y;
}

// Full network: residual encoder-decoder with interlaced Intra-SA/Inter-SA
// stacks at the two coarsest scales and a global residual to the input.
template <typename T>
Tensor<T> forward(const Tensor<T>& blurred, const StripformerParams<T>& p,
                  const StripformerConfig& cfg, AttentionStats* stats = nullptr) {
  if (blurred.rank() != 4 || blurred.extent(1) != 3) {
    throw ShapeError("forward: expected Nx3xHxW input, got " + shape_str(blurred.shape()));
  }
  const int64_t h = blurred.extent(2), w = blurred.extent(3);
  if (h % 4 != 0 || w % 4 != 0) {
    throw ShapeError("forward: H and W must be divisible by 4, got " + std::to_string(h) + "x" +
                     std::to_string(w) + " (pad by " + std::to_string((4 - h % 4) % 4) + "x" +
                     std::to_string((4 - w % 4) % 4) + ")");
  }
  Tensor<T> e1 = feb(blurred, p.feb1);  // c1 @ 1/2
  Tensor<T> e2 = feb(e1, p.feb2);       // c2 @ 1/4
  Tensor<T> y = conv2d(e2, p.neck_w, p.neck_b, 1, 1);
  for (size_t i = 0; i < p.bottleneck.size(); ++i) {
    y = (i % 2 == 0) ? intra_sa_block(y, p.bottleneck[i], stats)
                     : inter_sa_block(y, p.bottleneck[i], stats);
  }
  y = conv_transpose2d(y, p.up1_w, p.up1_b, 2, 0);
  y = conv2d(concat_channels(y, e1), p.merge1_w, p.merge1_b);
  for (size_t i = 0; i < p.mid.size(); ++i) {
    y = (i % 2 == 0) ? intra_sa_block(y, p.mid[i], stats) : inter_sa_block(y, p.mid[i], stats);
  }
  y = conv_transpose2d(y, p.up2_w, p.up2_b, 2, 0);
  y = conv2d(concat_channels(y, blurred), p.merge2_w, p.merge2_b);
  for (const auto& rb : p.tail) y = residual_block(y, rb);
  Tensor<T> residual = conv2d(y, p.final_w, p.final_b, 1, 1);
  return add(blurred, residual);
}

}  // namespace stripformer
