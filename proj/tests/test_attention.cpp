// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numeric>

#include "stripformer/stripformer.hpp"
#include "testutil.hpp"

using namespace stripformer;

namespace {

// Gather rows (H axis) of an NCHW tensor by an arbitrary permutation.
template <typename T>
Tensor<T> permute_rows(const Tensor<T>& x, const std::vector<int64_t>& perm) {
  const int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  Tensor<T> out(x.shape());
  for (int64_t nc = 0; nc < n * c; ++nc) {
    for (int64_t y = 0; y < h; ++y) {
      std::copy_n(x.data().begin() + (nc * h + perm[y]) * w, w,
                  out.data_mut().begin() + (nc * h + y) * w);
    }
  }
  return out;
}

template <typename T>
Tensor<T> permute_cols(const Tensor<T>& x, const std::vector<int64_t>& perm) {
  const int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  Tensor<T> out(x.shape());
  for (int64_t nc = 0; nc < n * c; ++nc) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t xx = 0; xx < w; ++xx) {
        out.data_mut()[(nc * h + y) * w + xx] = x.data()[(nc * h + y) * w + perm[xx]];
      }
    }
  }
  return out;
}

}  // namespace

TEST(SplitBranches, ShapesAndMixing) {
  Rng rng(1);
  auto x = Tensor<double>::uniform({1, 4, 3, 5}, rng);
  auto gamma = Tensor<double>::ones({4});
  auto beta = Tensor<double>::zeros({4});
  auto w = Tensor<double>::uniform({4, 4, 1, 1}, rng);
  auto b = Tensor<double>::zeros({4});
  auto [xh, xv] = split_branches(x, gamma, beta, w, b);
  EXPECT_EQ(xh.shape(), (Shape{1, 2, 3, 5}));
  EXPECT_EQ(xv.shape(), (Shape{1, 2, 3, 5}));

  auto xodd = Tensor<double>::uniform({1, 3, 2, 2}, rng);
  auto g3 = Tensor<double>::ones({3});
  EXPECT_THROW(split_branches(xodd, g3, g3, w, b), ConfigError);
}

TEST(SplitBranches, IdentityConvExposesNormalizedHalves) {
  Rng rng(2);
  auto x = Tensor<double>::uniform({1, 4, 3, 3}, rng);
  auto gamma = Tensor<double>::uniform({4}, rng, 0.5, 1.5);
  auto beta = Tensor<double>::uniform({4}, rng);
  Tensor<double> w({4, 4, 1, 1});
  for (int i = 0; i < 4; ++i) w.data_mut()[i * 4 + i] = 1.0;
  auto b = Tensor<double>::zeros({4});
  auto [xh, xv] = split_branches(x, gamma, beta, w, b);
  auto normed = layernorm_channels(x, gamma, beta);
  EXPECT_TRUE(testutil::exactly_equal(xh, slice_channels(normed, 0, 2)));
  EXPECT_TRUE(testutil::exactly_equal(xv, slice_channels(normed, 2, 4)));
}

TEST(SplitBranches, GradMatchesFiniteDifferences) {
  Rng rng(3);
  auto x = Tensor<double>::uniform({1, 4, 2, 3}, rng);
  auto gamma = Tensor<double>::uniform({4}, rng, 0.5, 1.5);
  auto beta = Tensor<double>::uniform({4}, rng);
  auto w = Tensor<double>::uniform({4, 4, 1, 1}, rng);
  auto b = Tensor<double>::uniform({4}, rng);
  auto report = finite_difference_check(
      {{"x", x}, {"gamma", gamma}, {"beta", beta}, {"w", w}, {"b", b}}, [&] {
        auto [xh, xv] = split_branches(x, gamma, beta, w, b);
        return add(mean_all(mul(xh, xh)), mean_all(mul(xv, xv)));
      });
  EXPECT_LT(report.max_rel_err, 1e-5);
}

TEST(IntraH, SingleStripMatchesNaiveMha) {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto x = Tensor<double>::uniform({1, 6, 1, 7}, rng);
    auto w = make_projection_weights<double>(6, rng);
    auto y = intra_strip_attention_h(x, w, 2);
    auto oracle = testutil::naive_mha_row(x, w, 2);
    double max_diff = 0;
    for (int64_t i = 0; i < y.numel(); ++i) {
      max_diff = std::max(max_diff, std::abs(y.data()[i] - oracle[i]));
    }
    EXPECT_LT(max_diff, 1e-6) << "seed " << seed;
  }
}

TEST(IntraH, SingleTokenStripIsValueProjection) {
  Rng rng(11);
  auto x = Tensor<double>::uniform({1, 4, 5, 1}, rng);  // W=1: one token per strip
  auto w = make_projection_weights<double>(4, rng);
  EXPECT_TRUE(testutil::exactly_equal(intra_strip_attention_h(x, w, 2), conv2d(x, w.wv)));
}

TEST(IntraH, RowPermutationEquivariantExactly) {
  Rng rng(12);
  auto x = Tensor<double>::uniform({1, 4, 6, 5}, rng);
  auto w = make_projection_weights<double>(4, rng);
  const std::vector<int64_t> perm = {3, 0, 5, 1, 4, 2};
  auto lhs = intra_strip_attention_h(permute_rows(x, perm), w, 2);
  auto rhs = permute_rows(intra_strip_attention_h(x, w, 2), perm);
  EXPECT_TRUE(testutil::exactly_equal(lhs, rhs));
}

TEST(IntraH, StripIndependenceExact) {
  Rng rng(13);
  auto x = Tensor<double>::uniform({1, 4, 5, 4}, rng);
  auto w = make_projection_weights<double>(4, rng);
  auto base = intra_strip_attention_h(x, w, 2);
  auto x2 = x.clone();
  const int64_t row = 2;
  for (int64_t c = 0; c < 4; ++c) {
    for (int64_t j = 0; j < 4; ++j) x2.data_mut()[(c * 5 + row) * 4 + j] = 0.0;
  }
  auto changed = intra_strip_attention_h(x2, w, 2);
  for (int64_t c = 0; c < 4; ++c) {
    for (int64_t y = 0; y < 5; ++y) {
      for (int64_t j = 0; j < 4; ++j) {
        const double a = base.data()[(c * 5 + y) * 4 + j];
        const double b = changed.data()[(c * 5 + y) * 4 + j];
        if (y == row) continue;
        EXPECT_EQ(a, b) << "row " << y << " must not change";
      }
    }
  }
}

TEST(IntraV, TransposeConjugationExact) {
  Rng rng(14);
  auto x = Tensor<double>::uniform({2, 4, 3, 6}, rng);
  auto w = make_projection_weights<double>(4, rng);
  auto direct = intra_strip_attention_v(x, w, 2);
  auto conjugated = transpose_hw(intra_strip_attention_h(transpose_hw(x), w, 2));
  EXPECT_TRUE(testutil::exactly_equal(direct, conjugated));
}

TEST(IntraV, SingleTokenColumnsAreValueProjection) {
  Rng rng(15);
  auto x = Tensor<double>::uniform({1, 4, 1, 3}, rng);  // H=1: vertical strips of one token
  auto w = make_projection_weights<double>(4, rng);
  EXPECT_TRUE(testutil::exactly_equal(intra_strip_attention_v(x, w, 2), conv2d(x, w.wv)));
}

TEST(IntraV, ColumnPermutationEquivariantExactly) {
  Rng rng(16);
  auto x = Tensor<double>::uniform({1, 4, 4, 6}, rng);
  auto w = make_projection_weights<double>(4, rng);
  const std::vector<int64_t> perm = {5, 2, 0, 4, 1, 3};
  auto lhs = intra_strip_attention_v(permute_cols(x, perm), w, 2);
  auto rhs = permute_cols(intra_strip_attention_v(x, w, 2), perm);
  EXPECT_TRUE(testutil::exactly_equal(lhs, rhs));
}

TEST(IntraV, GradMatchesFiniteDifferences) {
  Rng rng(17);
  auto x = Tensor<double>::uniform({1, 4, 3, 2}, rng);
  auto w = make_projection_weights<double>(4, rng);
  auto report = finite_difference_check(
      {{"x", x}, {"wq", w.wq}, {"wk", w.wk}, {"wv", w.wv}}, [&] {
        auto y = intra_strip_attention_v(x, w, 2);
        return mean_all(mul(y, y));
      });
  EXPECT_LT(report.max_rel_err, 1e-5);
}

TEST(InterH, SingleStripTokenIsValueProjection) {
  Rng rng(18);
  auto x = Tensor<double>::uniform({1, 4, 1, 6}, rng);  // H=1: one strip token
  auto w = make_projection_weights<double>(4, rng);
  EXPECT_TRUE(testutil::exactly_equal(inter_strip_attention_h(x, w, 2), conv2d(x, w.wv)));
}

TEST(InterH, RowPermutationEquivariantExactly) {
  Rng rng(19);
  auto x = Tensor<double>::uniform({1, 4, 6, 3}, rng);
  auto w = make_projection_weights<double>(4, rng);
  const std::vector<int64_t> perm = {4, 1, 5, 0, 2, 3};
  auto lhs = inter_strip_attention_h(permute_rows(x, perm), w, 2);
  auto rhs = permute_rows(inter_strip_attention_h(x, w, 2), perm);
  EXPECT_TRUE(testutil::exactly_equal(lhs, rhs));
}

TEST(InterH, ScoreEntriesMatchClosedForm) {
  Rng rng(20);
  auto x = Tensor<double>::uniform({1, 4, 6, 4}, rng);
  auto w = make_projection_weights<double>(4, rng);
  AttentionStats stats;
  inter_strip_attention_h(x, w, 2, &stats);
  EXPECT_EQ(stats.score_entries, 2 * 6 * 6);
}

TEST(InterV, MirrorProperties) {
  Rng rng(21);
  auto x = Tensor<double>::uniform({1, 4, 5, 3}, rng);
  auto w = make_projection_weights<double>(4, rng);
  auto direct = inter_strip_attention_v(x, w, 2);
  auto conjugated = transpose_hw(inter_strip_attention_h(transpose_hw(x), w, 2));
  EXPECT_TRUE(testutil::exactly_equal(direct, conjugated));

  // W=1: a single vertical strip token attends to itself with weight 1
  auto x1 = Tensor<double>::uniform({1, 4, 5, 1}, rng);
  EXPECT_TRUE(testutil::exactly_equal(inter_strip_attention_v(x1, w, 2), conv2d(x1, w.wv)));

  AttentionStats stats;
  inter_strip_attention_v(x, w, 2, &stats);
  EXPECT_EQ(stats.score_entries, 2 * 3 * 3);
}

TEST(InterBlocks, GradMatchesFiniteDifferences) {
  Rng rng(22);
  auto params = make_strip_block_params<double>(4, 2, 2, rng);
  auto x = Tensor<double>::uniform({1, 4, 3, 3}, rng);
  std::vector<std::pair<std::string, Tensor<double>>> leaves = {{"x", x}};
  detail::visit_strip_block<double>("p", params, [&](const std::string& name, Tensor<double>& t) {
    leaves.emplace_back(name, t);
  });
  auto report = finite_difference_check(leaves, [&] {
    auto y = inter_sa_block(x, params);
    return mean_all(mul(y, y));
  });
  EXPECT_LT(report.max_rel_err, 1e-5);
}

TEST(IntraBlock, EndToEndGradMatchesFiniteDifferences) {
  Rng rng(23);
  auto params = make_strip_block_params<double>(4, 2, 2, rng);
  auto x = Tensor<double>::uniform({1, 4, 3, 3}, rng);
  std::vector<std::pair<std::string, Tensor<double>>> leaves = {{"x", x}};
  detail::visit_strip_block<double>("p", params, [&](const std::string& name, Tensor<double>& t) {
    leaves.emplace_back(name, t);
  });
  auto report = finite_difference_check(leaves, [&] {
    auto y = intra_sa_block(x, params);
    return mean_all(mul(y, y));
  });
  EXPECT_LT(report.max_rel_err, 1e-5);
}

TEST(IntraBlock, ZeroOutputPathsReduceToCpeResidual) {
  Rng rng(24);
  auto params = make_strip_block_params<double>(6, 3, 2, rng);
  std::fill(params.out_w.data_mut().begin(), params.out_w.data_mut().end(), 0.0);
  std::fill(params.out_b.data_mut().begin(), params.out_b.data_mut().end(), 0.0);
  std::fill(params.mlp.fc2_w.data_mut().begin(), params.mlp.fc2_w.data_mut().end(), 0.0);
  std::fill(params.mlp.fc2_b.data_mut().begin(), params.mlp.fc2_b.data_mut().end(), 0.0);
  auto x = Tensor<double>::uniform({1, 6, 4, 5}, rng);
  auto block = intra_sa_block(x, params);
  auto expected = add(x, depthwise_conv2d(x, params.mlp.cpe_w, 1));
  EXPECT_LT(testutil::max_abs_diff(block, expected), 0.0 + 1e-300);
}

TEST(IntraBlock, ShapePreservedOnAwkwardDims) {
  Rng rng(25);
  auto params = make_strip_block_params<double>(10, 5, 2, rng);
  auto x = Tensor<double>::uniform({1, 10, 7, 5}, rng);
  EXPECT_EQ(intra_sa_block(x, params).shape(), x.shape());
  EXPECT_EQ(inter_sa_block(x, params).shape(), x.shape());
}

TEST(MlpBlock, ZeroedPathsGiveIdentity) {
  Rng rng(26);
  auto params = make_mlp_params<double>(4, 2, rng);
  std::fill(params.fc2_w.data_mut().begin(), params.fc2_w.data_mut().end(), 0.0);
  std::fill(params.fc2_b.data_mut().begin(), params.fc2_b.data_mut().end(), 0.0);
  std::fill(params.cpe_w.data_mut().begin(), params.cpe_w.data_mut().end(), 0.0);
  auto x = Tensor<double>::uniform({1, 4, 3, 3}, rng);
  EXPECT_LT(testutil::max_abs_diff(mlp_block(x, params), x), 1e-300);
}

TEST(MlpBlock, DeltaCpeDoublesTheStage) {
  Rng rng(27);
  auto params = make_mlp_params<double>(4, 2, rng);
  std::fill(params.fc2_w.data_mut().begin(), params.fc2_w.data_mut().end(), 0.0);
  std::fill(params.fc2_b.data_mut().begin(), params.fc2_b.data_mut().end(), 0.0);
  std::fill(params.cpe_w.data_mut().begin(), params.cpe_w.data_mut().end(), 0.0);
  for (int c = 0; c < 4; ++c) params.cpe_w.data_mut()[c * 9 + 4] = 1.0;  // delta kernel
  auto x = Tensor<double>::uniform({1, 4, 3, 3}, rng);
  EXPECT_LT(testutil::max_abs_diff(mlp_block(x, params), add(x, x)), 1e-12);
}

TEST(MlpBlock, GradMatchesFiniteDifferences) {
  Rng rng(28);
  auto params = make_mlp_params<double>(4, 2, rng);
  auto x = Tensor<double>::uniform({1, 4, 3, 3}, rng);
  auto report = finite_difference_check(
      {{"x", x},
       {"gamma", params.norm_gamma},
       {"beta", params.norm_beta},
       {"fc1w", params.fc1_w},
       {"fc1b", params.fc1_b},
       {"fc2w", params.fc2_w},
       {"fc2b", params.fc2_b},
       {"cpe", params.cpe_w}},
      [&] {
        auto y = mlp_block(x, params);
        return mean_all(mul(y, y));
      });
  EXPECT_LT(report.max_rel_err, 1e-5);
}

TEST(Vanilla, SinglePixelIsValueProjection) {
  Rng rng(29);
  auto x = Tensor<double>::uniform({1, 4, 1, 1}, rng);
  auto w = make_projection_weights<double>(4, rng);
  AttentionStats stats;
  auto y = vanilla_attention_reference(x, w, 2, &stats);
  EXPECT_TRUE(testutil::exactly_equal(y, conv2d(x, w.wv)));
  EXPECT_EQ(stats.score_entries, 2);
}

TEST(Vanilla, MatchesIntraHOnSingleRow) {
  for (uint64_t seed = 40; seed < 44; ++seed) {
    Rng rng(seed);
    auto x = Tensor<double>::uniform({1, 6, 1, 8}, rng);
    auto w = make_projection_weights<double>(6, rng);
    auto a = intra_strip_attention_h(x, w, 3);
    auto b = vanilla_attention_reference(x, w, 3);
    EXPECT_LT(testutil::max_abs_diff(a, b), 1e-6) << "seed " << seed;
  }
}

TEST(Vanilla, ScoreCountAndCap) {
  Rng rng(30);
  auto x = Tensor<double>::uniform({1, 4, 4, 4}, rng);
  auto w = make_projection_weights<double>(4, rng);
  AttentionStats stats;
  vanilla_attention_reference(x, w, 2, &stats);
  EXPECT_EQ(stats.score_entries, 2 * 256);
  EXPECT_THROW(vanilla_attention_reference(x, w, 2, nullptr, 15), ConfigError);
}

// The testable form of the quadratic-vs-strip complexity claim: exact
// score-entry counts across a dimension sweep.
TEST(CountingLaw, SweepMatchesClosedForms) {
  const int64_t c = 20, d = 10;
  for (int64_t h : {1, 2, 3, 5, 8}) {
    for (int64_t w : {1, 2, 3, 5, 8}) {
      for (int64_t m : {1, 2, 5}) {
        Rng rng(static_cast<uint64_t>(h * 100 + w * 10 + m));
        auto x = Tensor<float>::uniform({1, d, h, w}, rng);
        auto pw = make_projection_weights<float>(d, rng);
        AttentionStats intra, inter, vanilla;
        intra_strip_attention_h(x, pw, m, &intra);
        intra_strip_attention_v(x, pw, m, &intra);
        inter_strip_attention_h(x, pw, m, &inter);
        inter_strip_attention_v(x, pw, m, &inter);
        vanilla_attention_reference(x, pw, m, &vanilla);
        EXPECT_EQ(intra.score_entries, intra_score_entries(h, w, m)) << h << "x" << w << " m" << m;
        EXPECT_EQ(inter.score_entries, inter_score_entries(h, w, m)) << h << "x" << w << " m" << m;
        EXPECT_EQ(vanilla.score_entries, vanilla_score_entries(h, w, m))
            << h << "x" << w << " m" << m;
      }
    }
  }
}

TEST(AttentionConfig, HeadDivisibility) {
  EXPECT_THROW((AttentionConfig{10, 4}).validate(), ConfigError);
  EXPECT_NO_THROW((AttentionConfig{10, 5}).validate());
  EXPECT_THROW((AttentionConfig{7, 1}).validate(), ConfigError);
  Rng rng(31);
  auto x = Tensor<double>::uniform({1, 6, 2, 2}, rng);
  auto w = make_projection_weights<double>(6, rng);
  EXPECT_THROW(intra_strip_attention_h(x, w, 4), ConfigError);
}
