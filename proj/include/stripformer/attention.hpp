// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <utility>

#include "stripformer/conv.hpp"
#include "stripformer/ops.hpp"

namespace stripformer {

// Counters for one attention invocation. score_entries counts every scalar
// of every materialized attention-weight matrix; peak_activation_elements
// samples the thread-local memory gauge. Accumulates across calls on the
// same object so a block can sum its branches.
struct AttentionStats {
  int64_t score_entries = 0;
  int64_t peak_activation_elements = 0;
};

// Closed forms the instrumented counts must match (batch size 1).
inline int64_t intra_score_entries(int64_t h, int64_t w, int64_t m) {
  return m * (h * w * w + w * h * h);
}
inline int64_t inter_score_entries(int64_t h, int64_t w, int64_t m) { return m * (h * h + w * w); }
inline int64_t vanilla_score_entries(int64_t h, int64_t w, int64_t m) {
  return m * (h * w) * (h * w);
}

struct AttentionConfig {
  int64_t channels = 0;
  int64_t heads = 5;  // m; divides C/2

  int64_t branch_width() const { return channels / 2; }
  void validate() const {
    if (channels <= 0 || channels % 2 != 0) {
      throw ConfigError("attention: channels must be positive and even, got " +
                        std::to_string(channels));
    }
    if (heads <= 0 || branch_width() % heads != 0) {
      throw ConfigError("attention: heads m=" + std::to_string(heads) + " must divide D=C/2=" +
                        std::to_string(branch_width()));
    }
  }
};

// Per-branch query/key/value projections, realized as 1x1 convs over the D
// channels (head j owns output channels [j*D/m, (j+1)*D/m)).
template <typename T>
struct ProjectionWeights {
  Tensor<T> wq, wk, wv;  // [D, D, 1, 1], no bias
};

template <typename T>
struct MlpBlockParams {
  Tensor<T> norm_gamma, norm_beta;  // [C]
  Tensor<T> fc1_w, fc1_b;           // [r*C, C, 1, 1], [r*C]
  Tensor<T> fc2_w, fc2_b;           // [C, r*C, 1, 1], [C]
  Tensor<T> cpe_w;                  // [C, 1, 3, 3] depthwise positional conv
};

// Everything one Intra-SA or Inter-SA block owns: the shared Norm+Conv
// branch split, two directional projection sets, the post-concat output
// projection, and the trailing MLP block.
template <typename T>
struct StripBlockParams {
  int64_t heads = 0;
  Tensor<T> norm_gamma, norm_beta;  // [C]
  Tensor<T> split_w, split_b;       // [C, C, 1, 1], [C]
  ProjectionWeights<T> h, v;
  Tensor<T> out_w, out_b;  // [C, C, 1, 1], [C]
  MlpBlockParams<T> mlp;
};

template <typename T>
ProjectionWeights<T> make_projection_weights(int64_t d, Rng& rng) {
  ProjectionWeights<T> p;
  p.wq = Tensor<T>::trunc_normal({d, d, 1, 1}, rng, 0.02).set_requires_grad();
  p.wk = Tensor<T>::trunc_normal({d, d, 1, 1}, rng, 0.02).set_requires_grad();
  p.wv = Tensor<T>::trunc_normal({d, d, 1, 1}, rng, 0.02).set_requires_grad();
  return p;
}

template <typename T>
MlpBlockParams<T> make_mlp_params(int64_t c, int64_t ratio, Rng& rng) {
  MlpBlockParams<T> p;
  p.norm_gamma = Tensor<T>::ones({c}).set_requires_grad();
  p.norm_beta = Tensor<T>::zeros({c}).set_requires_grad();
  p.fc1_w = Tensor<T>::trunc_normal({ratio * c, c, 1, 1}, rng, 0.02).set_requires_grad();
  p.fc1_b = Tensor<T>::zeros({ratio * c}).set_requires_grad();
  p.fc2_w = Tensor<T>::trunc_normal({c, ratio * c, 1, 1}, rng, 0.02).set_requires_grad();
  p.fc2_b = Tensor<T>::zeros({c}).set_requires_grad();
  p.cpe_w = Tensor<T>::trunc_normal({c, 1, 3, 3}, rng, 0.02).set_requires_grad();
  return p;
}

template <typename T>
StripBlockParams<T> make_strip_block_params(int64_t c, int64_t heads, int64_t ratio, Rng& rng) {
  AttentionConfig{c, heads}.validate();
  StripBlockParams<T> p;
  p.heads = heads;
  p.norm_gamma = Tensor<T>::ones({c}).set_requires_grad();
  p.norm_beta = Tensor<T>::zeros({c}).set_requires_grad();
  p.split_w = Tensor<T>::trunc_normal({c, c, 1, 1}, rng, 0.02).set_requires_grad();
  p.split_b = Tensor<T>::zeros({c}).set_requires_grad();
  p.h = make_projection_weights<T>(c / 2, rng);
  p.v = make_projection_weights<T>(c / 2, rng);
  p.out_w = Tensor<T>::trunc_normal({c, c, 1, 1}, rng, 0.02).set_requires_grad();
  p.out_b = Tensor<T>::zeros({c}).set_requires_grad();
  p.mlp = make_mlp_params<T>(c, ratio, rng);
  return p;
}

namespace detail {

// [N,D,H,W] -> [N,H,m,W,d]: each horizontal strip becomes a batch of W
// pixel tokens of width d per head.
template <typename T>
Tensor<T> to_row_strips(const Tensor<T>& x, int64_t m) {
  const int64_t n = x.extent(0), dd = x.extent(1), h = x.extent(2), w = x.extent(3);
  return permute(reshape(x, {n, m, dd / m, h, w}), {0, 3, 1, 4, 2});
}

template <typename T>
Tensor<T> from_row_strips(const Tensor<T>& o) {
  const int64_t n = o.extent(0), h = o.extent(1), m = o.extent(2), w = o.extent(3),
                d = o.extent(4);
  return reshape(permute(o, {0, 2, 4, 1, 3}), {n, m * d, h, w});
}

// [N,D,H,W] -> [N,m,H,W*d]: each whole strip flattens into a single token.
template <typename T>
Tensor<T> to_row_tokens(const Tensor<T>& x, int64_t m) {
  const int64_t n = x.extent(0), dd = x.extent(1), h = x.extent(2), w = x.extent(3);
  const int64_t d = dd / m;
  return reshape(permute(reshape(x, {n, m, d, h, w}), {0, 1, 3, 4, 2}), {n, m, h, w * d});
}

template <typename T>
Tensor<T> from_row_tokens(const Tensor<T>& o, int64_t w, int64_t d) {
  const int64_t n = o.extent(0), m = o.extent(1), h = o.extent(2);
  return reshape(permute(reshape(o, {n, m, h, w, d}), {0, 1, 4, 2, 3}), {n, m * d, h, w});
}

template <typename T>
void check_branch_input(const Tensor<T>& x, int64_t heads, const char* op) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expected NDHW, got " + shape_str(x.shape()));
  if (heads <= 0 || x.extent(1) % heads != 0) {
    throw ConfigError(std::string(op) + ": heads m=" + std::to_string(heads) +
                      " must divide D=" + std::to_string(x.extent(1)));
  }
}

struct PeakScope {
  AttentionStats* stats;
  explicit PeakScope(AttentionStats* s) : stats(s) {
    if (stats) MemoryGauge::reset_peak();
  }
  ~PeakScope() {
    if (stats) {
      stats->peak_activation_elements =
          std::max(stats->peak_activation_elements, MemoryGauge::peak());
    }
  }
};

}  // namespace detail

// Eq-style branch split: LayerNorm then a 1x1 conv with C filters whose
// output halves become the horizontal and vertical branch inputs. Both
// halves mix all C input channels.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_branches(const Tensor<T>& x, const Tensor<T>& norm_gamma,
                                               const Tensor<T>& norm_beta, const Tensor<T>& conv_w,
                                               const Tensor<T>& conv_b) {
  if (x.rank() != 4) throw ShapeError("split_branches: expected NCHW, got " + shape_str(x.shape()));
  const int64_t c = x.extent(1);
  if (c % 2 != 0) throw ConfigError("split_branches: channels must be even, got " + std::to_string(c));
  Tensor<T> z = conv2d(layernorm_channels(x, norm_gamma, norm_beta), conv_w,
                       conv_b);
  return {slice_channels(z, 0, c / 2), slice_channels(z, c / 2, c)};
}

// Horizontal intra-strip attention: full multi-head attention among the W
// pixel tokens of each of the H one-pixel-high strips, strips independent.
template <typename T>
Tensor<T> intra_strip_attention_h(const Tensor<T>& xh, const ProjectionWeights<T>& w,
                                  int64_t heads, AttentionStats* stats = nullptr) {
  detail::check_branch_input(xh, heads, "intra_strip_attention_h");
  detail::PeakScope peak(stats);
  const int64_t d = xh.extent(1) / heads;
  Tensor<T> q = detail::to_row_strips(conv2d(xh, w.wq), heads);
  Tensor<T> k = detail::to_row_strips(conv2d(xh, w.wk), heads);
  Tensor<T> v = detail::to_row_strips(conv2d(xh, w.wv), heads);
  Tensor<T> scores = mul_scalar(matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(double(d))));
  if (stats) stats->score_entries += scores.numel();
  return detail::from_row_strips(attend(softmax_lastdim(scores), v));
}

// Vertical intra-strip attention: the same computation on the spatially
// transposed input, transposed back.
template <typename T>
Tensor<T> intra_strip_attention_v(const Tensor<T>& xv, const ProjectionWeights<T>& w,
                                  int64_t heads, AttentionStats* stats = nullptr) {
  detail::check_branch_input(xv, heads, "intra_strip_attention_v");
  return transpose_hw(intra_strip_attention_h(transpose_hw(xv), w, heads, stats));
}

// Horizontal inter-strip attention: each of the H strips flattens into one
// token of width W*d per head; attention is an HxH matrix per head.
template <typename T>
Tensor<T> inter_strip_attention_h(const Tensor<T>& xh, const ProjectionWeights<T>& w,
                                  int64_t heads, AttentionStats* stats = nullptr) {
  detail::check_branch_input(xh, heads, "inter_strip_attention_h");
  detail::PeakScope peak(stats);
  const int64_t d = xh.extent(1) / heads;
  const int64_t wd = xh.extent(3) * d;  // token width D^h/m
  Tensor<T> q = detail::to_row_tokens(conv2d(xh, w.wq), heads);
  Tensor<T> k = detail::to_row_tokens(conv2d(xh, w.wk), heads);
  Tensor<T> v = detail::to_row_tokens(conv2d(xh, w.wv), heads);
  Tensor<T> scores = mul_scalar(matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(double(wd))));
  if (stats) stats->score_entries += scores.numel();
  return detail::from_row_tokens(attend(softmax_lastdim(scores), v), xh.extent(3), d);
}

template <typename T>
Tensor<T> inter_strip_attention_v(const Tensor<T>& xv, const ProjectionWeights<T>& w,
                                  int64_t heads, AttentionStats* stats = nullptr) {
  detail::check_branch_input(xv, heads, "inter_strip_attention_v");
  return transpose_hw(inter_strip_attention_h(transpose_hw(xv), w, heads, stats));
}

// Norm -> pointwise 2-layer MLP (GELU) -> residual -> CPE (3x3 depthwise
// conv, residual).
template <typename T>
Tensor<T> mlp_block(const Tensor<T>& o_attn, const MlpBlockParams<T>& p) {
  Tensor<T> y = layernorm_channels(o_attn, p.norm_gamma, p.norm_beta);
  y = conv2d(y, p.fc1_w, p.fc1_b);
  y = gelu(y);
  y = conv2d(y, p.fc2_w, p.fc2_b);
  y = add(y, o_attn);
  return add(y, depthwise_conv2d(y, p.cpe_w, 1));
}

namespace detail {

template <typename T, typename BranchH, typename BranchV>
Tensor<T> strip_block(const Tensor<T>& x, const StripBlockParams<T>& p, AttentionStats* stats,
                      BranchH&& branch_h, BranchV&& branch_v) {
  PeakScope peak(stats);
  auto [xh, xv] = split_branches(x, p.norm_gamma, p.norm_beta, p.split_w, p.split_b);
  Tensor<T> oh = branch_h(xh, p.h, p.heads, stats);
  Tensor<T> ov = branch_v(xv, p.v, p.heads, stats);
  Tensor<T> o_attn =
      add(conv2d(concat_channels(oh, ov), p.out_w, p.out_b), x);
  return mlp_block(o_attn, p.mlp);
}

}  // namespace detail

template <typename T>
Tensor<T> intra_sa_block(const Tensor<T>& x, const StripBlockParams<T>& p,
                         AttentionStats* stats = nullptr) {
  return detail::strip_block(x, p, stats, intra_strip_attention_h<T>, intra_strip_attention_v<T>);
}

template <typename T>
Tensor<T> inter_sa_block(const Tensor<T>& x, const StripBlockParams<T>& p,
                         AttentionStats* stats = nullptr) {
  return detail::strip_block(x, p, stats, inter_strip_attention_h<T>, inter_strip_attention_v<T>);
}

// Full multi-head attention over all H*W pixel tokens. Baseline for the
// space-complexity bench and the equivalence oracles; guarded by a token
// cap since the score matrix is (HW)^2 per head.
template <typename T>
Tensor<T> vanilla_attention_reference(const Tensor<T>& x, const ProjectionWeights<T>& w,
                                      int64_t heads, AttentionStats* stats = nullptr,
                                      int64_t max_tokens = 4096) {
  detail::check_branch_input(x, heads, "vanilla_attention_reference");
  const int64_t n = x.extent(0), dd = x.extent(1), h = x.extent(2), wi = x.extent(3);
  const int64_t tokens = h * wi;
  if (tokens > max_tokens) {
    throw ConfigError("vanilla_attention_reference: " + std::to_string(tokens) +
                      " tokens exceed cap " + std::to_string(max_tokens));
  }
  detail::PeakScope peak(stats);
  const int64_t d = dd / heads;
  auto tokenize = [&](const Tensor<T>& t) {
    return permute(reshape(t, {n, heads, d, tokens}), {0, 1, 3, 2});
  };
  Tensor<T> q = tokenize(conv2d(x, w.wq));
  Tensor<T> k = tokenize(conv2d(x, w.wk));
  Tensor<T> v = tokenize(conv2d(x, w.wv));
  Tensor<T> scores = mul_scalar(matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(double(d))));
  if (stats) stats->score_entries += scores.numel();
  Tensor<T> o = attend(softmax_lastdim(scores), v);
  return reshape(permute(o, {0, 1, 3, 2}), {n, dd, h, wi});
}

}  // namespace stripformer
