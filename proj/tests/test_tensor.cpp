// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "stripformer/stripformer.hpp"
#include "testutil.hpp"

using namespace stripformer;

TEST(Tensor, ShapeAndDataInvariant) {
  Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_THROW(Tensor<float>({2, 3}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
}

TEST(Tensor, ScalarItem) {
  EXPECT_DOUBLE_EQ(Tensor<double>::scalar(2.5).item(), 2.5);
  Tensor<double> v({3});
  EXPECT_THROW(v.item(), UsageError);
}

TEST(Tensor, GradAccumulatesAcrossBackwardCalls) {
  auto x = Tensor<double>({2}, {1.0, 2.0}).set_requires_grad();
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  auto loss = sum_all(mul(x, x));
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
  tape.backward(loss);  // no reset: doubles up
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
}

TEST(Tensor, BackwardRequiresScalarLoss) {
  auto x = Tensor<double>({2}, {1.0, 2.0}).set_requires_grad();
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  auto y = mul(x, x);
  EXPECT_THROW(tape.backward(y), UsageError);
}

TEST(Tensor, SumBackwardIsOnes) {
  Rng rng(1);
  auto x = Tensor<double>::uniform({2, 3}, rng);
  x.set_requires_grad();
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(sum_all(x));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Tensor, StrictFiniteDetectsNan) {
  set_strict_finite(true);
  auto a = Tensor<float>({2}, {1.0f, 0.0f});
  auto b = Tensor<float>({2}, {0.0f, 0.0f});
  EXPECT_THROW(div(a, b), Error);
  set_strict_finite(std::nullopt);
}

TEST(Matmul, IdentityAndHandCases) {
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> m({2, 2}, {2, 3, 4, 5});
  EXPECT_TRUE(testutil::exactly_equal(matmul(eye, m), m));

  Tensor<double> a({1, 2}, {1, 2});
  Tensor<double> b({2, 1}, {3, 4});
  EXPECT_DOUBLE_EQ(matmul(a, b).item(), 11.0);
}

TEST(Matmul, ShapeMismatchReportsBothShapes) {
  Tensor<double> a({2, 3});
  Tensor<double> b({2, 2});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[2, 2]"), std::string::npos);
  }
}

TEST(Matmul, GradMatchesFiniteDifferences) {
  Rng rng(42);
  auto a = Tensor<double>::uniform({3, 4}, rng);
  auto b = Tensor<double>::uniform({4, 2}, rng);
  auto report = finite_difference_check({{"a", a}, {"b", b}},
                                        [&] { return sum_all(matmul(a, b)); });
  EXPECT_LT(report.max_rel_err, 1e-5);
}

TEST(Matmul, BatchedMatchesPerSlice) {
  Rng rng(3);
  auto a = Tensor<double>::uniform({2, 3, 4}, rng);
  auto b = Tensor<double>::uniform({2, 4, 5}, rng);
  auto c = matmul(a, b);
  for (int64_t s = 0; s < 2; ++s) {
    Tensor<double> as({3, 4}), bs({4, 5});
    std::copy_n(a.data().begin() + s * 12, 12, as.data_mut().begin());
    std::copy_n(b.data().begin() + s * 20, 20, bs.data_mut().begin());
    auto cs = matmul(as, bs);
    for (int64_t i = 0; i < 15; ++i) EXPECT_EQ(cs.data()[i], c.data()[s * 15 + i]);
  }
}

TEST(Softmax, UniformAndStability) {
  Tensor<double> z({3}, {0, 0, 0});
  auto y = softmax_lastdim(z);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3, 1e-12);

  Tensor<double> big({2}, {1000, 0});
  auto yb = softmax_lastdim(big);
  EXPECT_NEAR(yb.data()[0], 1.0, 1e-12);
  EXPECT_LT(yb.data()[1], 1e-300);
  for (double v : yb.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(9);
  auto x = Tensor<double>::uniform({4, 7}, rng, -3, 3);
  auto y = softmax_lastdim(x);
  for (int64_t r = 0; r < 4; ++r) {
    double s = 0;
    for (int64_t i = 0; i < 7; ++i) s += y.data()[r * 7 + i];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  auto shifted = softmax_lastdim(add_scalar(x, 5.0));
  EXPECT_LT(testutil::max_abs_diff(y, shifted), 1e-12);
}

TEST(Softmax, JacobianMatchesFiniteDifferences) {
  Rng rng(11);
  auto x = Tensor<double>::uniform({5}, rng, -2, 2);
  auto probe = Tensor<double>::uniform({5}, rng);
  auto report = finite_difference_check(
      {{"x", x}}, [&] { return sum_all(mul(softmax_lastdim(x), probe)); });
  EXPECT_LT(report.max_rel_err, 1e-5);
}

TEST(Softmax, EmptyLastDimIsError) {
  EXPECT_THROW(softmax_lastdim(Tensor<double>::scalar(1.0)), ShapeError);
}

TEST(Elementwise, ReshapeRoundTripBitExact) {
  Rng rng(5);
  auto x = Tensor<double>::uniform({3, 4, 5}, rng);
  auto back = reshape(reshape(x, {60}), {3, 4, 5});
  EXPECT_TRUE(testutil::exactly_equal(x, back));
  EXPECT_THROW(reshape(x, {7, 7}), ShapeError);
}

TEST(Elementwise, PermuteRoundTripBitExact) {
  Rng rng(6);
  auto x = Tensor<double>::uniform({2, 3, 4, 5}, rng);
  auto p = permute(x, {3, 1, 0, 2});
  auto back = permute(p, {2, 1, 3, 0});
  EXPECT_TRUE(testutil::exactly_equal(x, back));
  EXPECT_THROW(permute(x, {0, 1, 2, 2}), ShapeError);
}

TEST(Elementwise, ConcatSliceRecoverHalves) {
  Rng rng(7);
  auto a = Tensor<double>::uniform({1, 2, 3, 3}, rng);
  auto b = Tensor<double>::uniform({1, 3, 3, 3}, rng);
  auto cat = concat_channels(a, b);
  EXPECT_EQ(cat.extent(1), 5);
  EXPECT_TRUE(testutil::exactly_equal(slice_channels(cat, 0, 2), a));
  EXPECT_TRUE(testutil::exactly_equal(slice_channels(cat, 2, 5), b));
}

TEST(Elementwise, ActivationGradsAwayFromZero) {
  Rng rng(8);
  // inputs bounded away from the relu/abs kinks
  Tensor<double> x({6}, {0.5, 1.2, -0.7, -1.5, 2.0, 0.9});
  for (auto* f : {&relu<double>, &gelu<double>, &stripformer::abs<double>}) {
    auto report = finite_difference_check({{"x", x}}, [&] { return sum_all(f(x)); });
    EXPECT_LT(report.max_rel_err, 1e-5);
  }
  auto xs = Tensor<double>({3}, {0.5, 1.5, 2.5});
  auto rs = finite_difference_check({{"x", xs}}, [&] { return sum_all(stripformer::sqrt(xs)); });
  EXPECT_LT(rs.max_rel_err, 1e-5);
}

TEST(Elementwise, SquareLossGradHandCase) {
  auto x = Tensor<double>({2}, {1.0, 2.0}).set_requires_grad();
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(sum_all(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Elementwise, MeanAndDivGrads) {
  Rng rng(13);
  auto x = Tensor<double>::uniform({3, 3}, rng, 0.5, 2.0);
  auto y = Tensor<double>::uniform({3, 3}, rng, 0.5, 2.0);
  auto report = finite_difference_check({{"x", x}, {"y", y}},
                                        [&] { return mean_all(div(x, y)); });
  EXPECT_LT(report.max_rel_err, 1e-5);
}

TEST(LayerNorm, HandCasesAndInvariance) {
  // constant channel vector -> output equals beta
  Tensor<double> x({1, 3, 1, 1}, {4, 4, 4});
  Tensor<double> gamma({3}, {1, 1, 1});
  Tensor<double> beta({3}, {0.3, -0.2, 0.7});
  auto y = layernorm_channels(x, gamma, beta);
  EXPECT_NEAR(y.data()[0], 0.3, 1e-12);
  EXPECT_NEAR(y.data()[1], -0.2, 1e-12);
  EXPECT_NEAR(y.data()[2], 0.7, 1e-12);

  // [1,-1] normalizes to +-1/sqrt(1+eps)
  Tensor<double> x2({1, 2, 1, 1}, {1, -1});
  Tensor<double> g2({2}, {1, 1});
  Tensor<double> b2({2}, {0, 0});
  auto y2 = layernorm_channels(x2, g2, b2);
  EXPECT_NEAR(y2.data()[0], 1.0 / std::sqrt(1.0 + 1e-5), 1e-12);
  EXPECT_NEAR(y2.data()[1], -1.0 / std::sqrt(1.0 + 1e-5), 1e-12);
}

TEST(LayerNorm, AffineShiftInvariance) {
  Rng rng(17);
  auto x = Tensor<double>::uniform({1, 5, 2, 2}, rng);
  auto gamma = Tensor<double>::uniform({5}, rng, 0.5, 1.5);
  auto beta = Tensor<double>::uniform({5}, rng);
  auto y1 = layernorm_channels(x, gamma, beta);
  auto y2 = layernorm_channels(add_scalar(mul_scalar(x, 3.0), 0.7), gamma, beta);
  EXPECT_LT(testutil::max_abs_diff(y1, y2), 1e-6);
}

TEST(LayerNorm, GradMatchesFiniteDifferences) {
  Rng rng(19);
  auto x = Tensor<double>::uniform({1, 4, 2, 3}, rng);
  auto gamma = Tensor<double>::uniform({4}, rng, 0.5, 1.5);
  auto beta = Tensor<double>::uniform({4}, rng);
  auto probe = Tensor<double>::uniform({1, 4, 2, 3}, rng);
  auto report =
      finite_difference_check({{"x", x}, {"gamma", gamma}, {"beta", beta}}, [&] {
        return sum_all(mul(layernorm_channels(x, gamma, beta), probe));
      });
  EXPECT_LT(report.max_rel_err, 1e-4);
}

TEST(LayerNorm, RejectsSingleChannel) {
  Tensor<double> x({1, 1, 2, 2});
  Tensor<double> g({1}), b({1});
  EXPECT_THROW(layernorm_channels(x, g, b), ShapeError);
}

// Property sweep: autodiff gradients match central differences for every
// differentiable op on small random shapes.
TEST(GradSweep, CoreOpsWithinTolerance) {
  Rng rng(23);
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    Rng r(seed);
    auto a = Tensor<double>::uniform({2, 3, 4}, r);
    auto b = Tensor<double>::uniform({2, 3, 4}, r);
    auto rep = finite_difference_check({{"a", a}, {"b", b}}, [&] {
      auto s = add(mul(a, b), sub(a, b));
      return mean_all(mul(s, s));
    });
    EXPECT_LT(rep.max_rel_err, 1e-5) << "seed " << seed;
  }
}
