// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "stripformer/stripformer.hpp"
#include "testutil.hpp"

using namespace stripformer;

TEST(Conv2d, IdentityPointwise) {
  Rng rng(1);
  auto x = Tensor<double>::uniform({1, 3, 4, 4}, rng);
  Tensor<double> w({3, 3, 1, 1}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_TRUE(testutil::exactly_equal(conv2d(x, w), x));
}

TEST(Conv2d, OnesKernelCenterSum) {
  auto x = Tensor<double>::ones({1, 1, 3, 3});
  auto w = Tensor<double>::ones({1, 1, 3, 3});
  auto y = conv2d(x, w, 1, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_DOUBLE_EQ(y.data()[4], 9.0);  // center sees the full window
  EXPECT_DOUBLE_EQ(y.data()[0], 4.0);  // corner sees 2x2
}

TEST(Conv2d, NonIntegralOutputExtentIsError) {
  Tensor<double> x({1, 1, 5, 5});
  Tensor<double> w({1, 1, 2, 2});
  EXPECT_THROW(conv2d(x, w, 2, 0), ConfigError);
  Tensor<double> wc({1, 2, 1, 1});
  EXPECT_THROW(conv2d(x, wc), ShapeError);  // channel mismatch
}

TEST(Conv2d, GradMatchesFiniteDifferences) {
  Rng rng(2);
  auto x = Tensor<double>::uniform({1, 2, 5, 5}, rng);
  auto w = Tensor<double>::uniform({3, 2, 3, 3}, rng);
  auto b = Tensor<double>::uniform({3}, rng);
  auto report = finite_difference_check({{"x", x}, {"w", w}, {"b", b}},
                                        [&] { return sum_all(conv2d(x, w, b, 1, 1)); });
  EXPECT_LT(report.max_rel_err, 1e-4);
}

TEST(Conv2d, StridedGradMatchesFiniteDifferences) {
  Rng rng(3);
  auto x = Tensor<double>::uniform({1, 2, 6, 6}, rng);
  auto w = Tensor<double>::uniform({4, 2, 2, 2}, rng);
  auto report = finite_difference_check({{"x", x}, {"w", w}}, [&] {
    auto y = conv2d(x, w, 2, 0);
    return mean_all(mul(y, y));
  });
  EXPECT_LT(report.max_rel_err, 1e-4);
}

TEST(ConvTranspose2d, AdjointIdentity) {
  // <conv(x, w), y> == <x, conv_T(y, w)> for the same weight tensor
  Rng rng(4);
  auto x = Tensor<double>::uniform({1, 3, 6, 6}, rng);
  auto w = Tensor<double>::uniform({2, 3, 2, 2}, rng);
  auto y = Tensor<double>::uniform({1, 2, 3, 3}, rng);
  auto cx = conv2d(x, w, 2, 0);
  auto cty = conv_transpose2d(y, w, 2, 0);
  double lhs = 0, rhs = 0;
  for (int64_t i = 0; i < cx.numel(); ++i) lhs += cx.data()[i] * y.data()[i];
  for (int64_t i = 0; i < x.numel(); ++i) rhs += x.data()[i] * cty.data()[i];
  EXPECT_NEAR(lhs, rhs, 1e-5 * std::max(1.0, std::abs(lhs)));
}

TEST(ConvTranspose2d, ShapeDoublesAndZeroMapsToZero) {
  Rng rng(5);
  auto x = Tensor<double>::uniform({1, 3, 2, 2}, rng);
  auto w = Tensor<double>::uniform({3, 5, 2, 2}, rng);
  auto y = conv_transpose2d(x, w, 2, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 5, 4, 4}));

  auto zero = Tensor<double>::zeros({1, 3, 2, 2});
  auto yz = conv_transpose2d(zero, w, 2, 0);
  for (double v : yz.data()) EXPECT_DOUBLE_EQ(v, 0.0);

  EXPECT_THROW(conv_transpose2d(x, w, 3, 0), ConfigError);
}

TEST(ConvTranspose2d, GradMatchesFiniteDifferences) {
  Rng rng(6);
  auto x = Tensor<double>::uniform({1, 2, 3, 3}, rng);
  auto w = Tensor<double>::uniform({2, 3, 2, 2}, rng);
  auto b = Tensor<double>::uniform({3}, rng);
  auto report = finite_difference_check({{"x", x}, {"w", w}, {"b", b}}, [&] {
    auto y = conv_transpose2d(x, w, b, 2, 0);
    return mean_all(mul(y, y));
  });
  EXPECT_LT(report.max_rel_err, 1e-4);
}

TEST(Depthwise, DeltaKernelIsIdentity) {
  Rng rng(7);
  auto x = Tensor<double>::uniform({1, 3, 4, 4}, rng);
  Tensor<double> w({3, 1, 3, 3});
  for (int c = 0; c < 3; ++c) w.data_mut()[c * 9 + 4] = 1.0;
  EXPECT_TRUE(testutil::exactly_equal(depthwise_conv2d(x, w, 1), x));
}

TEST(Depthwise, ChannelsAreIndependent) {
  Rng rng(8);
  auto x = Tensor<double>::uniform({1, 3, 4, 4}, rng);
  auto w = Tensor<double>::uniform({3, 1, 3, 3}, rng);
  auto y0 = depthwise_conv2d(x, w, 1);
  auto x2 = x.clone();
  x2.data_mut()[5] += 1.0;  // perturb channel 0 only
  auto y1 = depthwise_conv2d(x2, w, 1);
  for (int64_t c = 1; c < 3; ++c) {
    for (int64_t i = 0; i < 16; ++i) {
      EXPECT_EQ(y0.data()[c * 16 + i], y1.data()[c * 16 + i]);
    }
  }
  double ch0 = 0;
  for (int64_t i = 0; i < 16; ++i) ch0 += std::abs(y0.data()[i] - y1.data()[i]);
  EXPECT_GT(ch0, 0.0);
  EXPECT_THROW(depthwise_conv2d(x, Tensor<double>({2, 1, 3, 3}), 1), ShapeError);
}

TEST(Depthwise, GradMatchesFiniteDifferences) {
  Rng rng(9);
  auto x = Tensor<double>::uniform({1, 2, 4, 4}, rng);
  auto w = Tensor<double>::uniform({2, 1, 3, 3}, rng);
  auto report = finite_difference_check({{"x", x}, {"w", w}}, [&] {
    auto y = depthwise_conv2d(x, w, 1);
    return mean_all(mul(y, y));
  });
  EXPECT_LT(report.max_rel_err, 1e-4);
}

TEST(AvgPool, MeanAndGrad) {
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  auto y = avg_pool2d(x, 2);
  EXPECT_DOUBLE_EQ(y.item(), 2.5);
  Rng rng(10);
  auto xr = Tensor<double>::uniform({1, 2, 4, 4}, rng);
  auto report = finite_difference_check({{"x", xr}}, [&] {
    auto p = avg_pool2d(xr, 2);
    return mean_all(mul(p, p));
  });
  EXPECT_LT(report.max_rel_err, 1e-5);
  EXPECT_THROW(avg_pool2d(Tensor<double>({1, 1, 3, 3}), 2), ShapeError);
}

TEST(ReflectPad, MirrorsWithoutEdgeDuplication) {
  Tensor<double> x({1, 1, 1, 3}, {1, 2, 3});
  auto y = reflect_pad2d(x, 2, 2, 0, 0);
  std::vector<double> expect = {3, 2, 1, 2, 3, 2, 1};
  for (int64_t i = 0; i < 7; ++i) EXPECT_DOUBLE_EQ(y.data()[i], expect[i]);
  EXPECT_THROW(reflect_pad2d(x, 3, 0, 0, 0), ShapeError);
}

TEST(ReflectPad, GradMatchesFiniteDifferences) {
  Rng rng(11);
  auto x = Tensor<double>::uniform({1, 2, 3, 4}, rng);
  auto report = finite_difference_check({{"x", x}}, [&] {
    auto p = reflect_pad2d(x, 1, 1, 1, 1);
    return mean_all(mul(p, p));
  });
  EXPECT_LT(report.max_rel_err, 1e-5);
}
