#include <gtest/gtest.h>

#include <cmath>

#include "fnk/gradcheck.hpp"
#include "fnk/nn_ops.hpp"
#include "oracles.hpp"

using namespace fnk;

namespace {

const Tensor kImage3x3(Shape{1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(DepthwiseConv, ZeroWeightsGiveZeroOutput) {
  Rng r(1);
  const Tensor x = gaussian(Shape{2, 3, 5, 5}, 0, 1, r);
  const auto p = make_depthwise(3, 3, 3);
  EXPECT_EQ(depthwise_conv_forward(x, p), zeros_like(x));
}

TEST(DepthwiseConv, OneByOneIsPerChannelScale) {
  Rng r(2);
  const Tensor x = gaussian(Shape{2, 3, 4, 4}, 0, 1, r);
  auto p = make_depthwise(3, 1, 1);
  p.weights = Tensor(Shape{1, 3, 1, 1}, {0.25, -0.5, 2.0});
  const Tensor y = depthwise_conv_forward(x, p);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y.plane(n, c)[i], p.weights[c] * x.plane(n, c)[i]);
}

TEST(DepthwiseConv, AllOnesCenterSumsWindow) {
  const auto p = make_depthwise(1, 3, 3, 1.0);
  const Tensor y = depthwise_conv_forward(kImage3x3, p);
  EXPECT_EQ(y.at(0, 0, 1, 1), 45.0);
  EXPECT_EQ(y, oracle::naive_depthwise(kImage3x3, p.weights));
}

TEST(DepthwiseConv, MatchesBruteForceForAllOddWindows) {
  Rng r(3);
  for (std::size_t kh : {1u, 3u, 5u, 7u})
    for (std::size_t kw : {1u, 3u, 5u}) {
      const Tensor x = gaussian(Shape{2, 3, 6, 5}, 0, 1, r);
      auto p = make_depthwise(3, kh, kw);
      p.weights = gaussian(p.weights.shape(), 0, 1, r);
      const Tensor y = depthwise_conv_forward(x, p);
      EXPECT_EQ(y.shape(), x.shape()) << kh << "x" << kw;
      EXPECT_LT(max_abs_diff(y, oracle::naive_depthwise(x, p.weights)), 1e-12);
    }
}

TEST(DepthwiseConv, ChannelMismatchIsShapeError) {
  const auto p = make_depthwise(2, 3, 3);
  try {
    depthwise_conv_forward(zeros(Shape{1, 3, 4, 4}), p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
  }
}

TEST(DepthwiseConv, Linearity) {
  Rng r(4);
  auto p = make_depthwise(2, 3, 3);
  p.weights = gaussian(p.weights.shape(), 0, 1, r);
  for (int t = 0; t < 10; ++t) {
    const Tensor x = gaussian(Shape{2, 2, 5, 5}, 0, 1, r), y = gaussian(Shape{2, 2, 5, 5}, 0, 1, r);
    const double a = r.normal(), b = r.normal();
    const Tensor lhs = depthwise_conv_forward(add(mul_scalar(x, a), mul_scalar(y, b)), p);
    const Tensor rhs = add(mul_scalar(depthwise_conv_forward(x, p), a), mul_scalar(depthwise_conv_forward(y, p), b));
    EXPECT_LT(max_abs_diff(lhs, rhs), 1e-12);
  }
}

TEST(DepthwiseConv, BackwardZeroGradAndOneByOne) {
  Rng r(5);
  const Tensor x = gaussian(Shape{2, 2, 3, 3}, 0, 1, r);
  auto p = make_depthwise(2, 3, 3);
  p.weights = gaussian(p.weights.shape(), 0, 1, r);
  const auto g0 = depthwise_conv_backward(x, p, zeros_like(x));
  EXPECT_EQ(g0.grad_x, zeros_like(x));
  EXPECT_EQ(g0.grad_weights, zeros_like(p.weights));

  auto p1 = make_depthwise(2, 1, 1, 0.5);
  const Tensor go = gaussian(x.shape(), 0, 1, r);
  const auto g1 = depthwise_conv_backward(x, p1, go);
  for (std::size_t c = 0; c < 2; ++c) {
    double expect = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 9; ++i) expect += x.plane(n, c)[i] * go.plane(n, c)[i];
    EXPECT_NEAR(g1.grad_weights[c], expect, 1e-12);
  }
}

TEST(DepthwiseConv, AdjointDotProductIdentity) {
  Rng r(6);
  for (int t = 0; t < 20; ++t) {
    const Shape s{2, 3, 2 + static_cast<std::size_t>(t % 4), 3 + static_cast<std::size_t>(t % 3)};
    const std::size_t k = 1 + 2 * (t % 3);
    const Tensor x = gaussian(s, 0, 1, r), u = gaussian(s, 0, 1, r);
    auto p = make_depthwise(3, k, k);
    p.weights = gaussian(p.weights.shape(), 0, 1, r);
    const auto g = depthwise_conv_backward(x, p, u);
    // <fwd(x; w), u> is bilinear: it equals <x, grad_x> and <w, grad_w>.
    const double lhs = dot(depthwise_conv_forward(x, p), u);
    EXPECT_NEAR(lhs, dot(x, g.grad_x), 1e-9);
    EXPECT_NEAR(lhs, dot(p.weights, g.grad_weights), 1e-9);
  }
}

TEST(DepthwiseConv, GradientMatchesFiniteDifferencesOnTinyInput) {
  Rng r(7);
  const Tensor x = gaussian(Shape{1, 1, 2, 2}, 0, 1, r);
  auto p = make_depthwise(1, 3, 3);
  p.weights = gaussian(p.weights.shape(), 0, 1, r);
  const Tensor u = gaussian(x.shape(), 0, 1, r);
  const auto g = depthwise_conv_backward(x, p, u);
  const Tensor nx = numeric_gradient([&](const Tensor& xx) { return dot(depthwise_conv_forward(xx, p), u); }, x, 1e-5);
  const Tensor nw = numeric_gradient(
      [&](const Tensor& w) {
        auto q = p;
        q.weights = w;
        return dot(depthwise_conv_forward(x, q), u);
      },
      p.weights, 1e-5);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(relative_error(g.grad_x[i], nx[i]), 1e-6);
  for (std::size_t i = 0; i < nw.size(); ++i) EXPECT_LE(relative_error(g.grad_weights[i], nw[i]), 1e-6);
}

TEST(Conv, IdentityAndZeroKernels) {
  Rng r(8);
  const Tensor x = gaussian(Shape{2, 3, 4, 4}, 0, 1, r);
  Tensor eye(Shape{3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) eye.at(c, c, 0, 0) = 1.0;
  EXPECT_EQ(conv_forward(x, ConvParams{eye, std::nullopt, 0, 1}), x);
  EXPECT_EQ(conv_forward(x, ConvParams{Tensor(Shape{4, 3, 3, 3}), std::nullopt, 1, 1}), zeros(Shape{2, 4, 4, 4}));
}

TEST(Conv, MatchesNaiveSixLoopOracle) {
  Rng r(9);
  const Tensor x = gaussian(Shape{1, 2, 4, 4}, 0, 1, r);
  const Tensor w = gaussian(Shape{3, 2, 3, 3}, 0, 1, r);
  EXPECT_LT(max_abs_diff(conv_forward(x, ConvParams{w, std::nullopt, 1, 1}), oracle::naive_conv(x, w, {}, 1, 1)),
            1e-12);
  for (std::size_t stride : {1u, 2u, 3u})
    for (std::size_t pad : {0u, 1u, 2u}) {
      const Tensor xx = gaussian(Shape{2, 2, 7, 6}, 0, 1, r);
      const Tensor b = gaussian(Shape{1, 3, 1, 1}, 0, 1, r);
      const Tensor y = conv_forward(xx, ConvParams{w, b, pad, stride});
      const Tensor ref = oracle::naive_conv(xx, w, b.values(), pad, stride);
      ASSERT_EQ(y.shape(), ref.shape());
      EXPECT_LT(max_abs_diff(y, ref), 1e-12) << "stride " << stride << " pad " << pad;
    }
}

TEST(Conv, ChannelMismatch) {
  EXPECT_THROW(conv_forward(zeros(Shape{1, 2, 3, 3}), ConvParams{Tensor(Shape{1, 3, 1, 1}), std::nullopt, 0, 1}),
               Error);
}

TEST(Conv, AdjointIdentityWithStride) {
  Rng r(10);
  for (std::size_t stride : {1u, 2u}) {
    const Tensor x = gaussian(Shape{2, 3, 7, 7}, 0, 1, r);
    const ConvParams p{gaussian(Shape{4, 3, 3, 3}, 0, 1, r), gaussian(Shape{1, 4, 1, 1}, 0, 1, r), 1, stride};
    const Tensor y = conv_forward(x, p);
    const Tensor u = gaussian(y.shape(), 0, 1, r);
    const auto g = conv_backward(x, p, u);
    const double lhs = dot(y, u);
    EXPECT_NEAR(lhs - dot(*p.bias, *g.grad_bias), dot(x, g.grad_x), 1e-9);
    EXPECT_NEAR(lhs - dot(*p.bias, *g.grad_bias), dot(p.weights, g.grad_weights), 1e-9);
  }
}

TEST(Norm, NoneIsIdentityBothWays) {
  Rng r(11);
  const Tensor x = gaussian(Shape{2, 3, 3, 3}, 0, 1, r);
  const auto p = make_norm(NormKind::None, 3);
  EXPECT_EQ(norm_forward(x, p, Mode::Train).y, x);
  EXPECT_EQ(norm_backward(x, p, x, Mode::Train).grad_x, x);
}

TEST(Norm, ConstantInputBatchNormGivesZeros) {
  const auto p = make_norm(NormKind::BatchNorm, 2);
  const auto f = norm_forward(full(Shape{3, 2, 2, 2}, 4.0), p, Mode::Train);
  for (double v : f.y.data()) EXPECT_EQ(v, 0.0);
  ASSERT_TRUE(f.running.has_value());
  EXPECT_DOUBLE_EQ(f.running->mean[0], 0.4);  // 0.9 * 0 + 0.1 * 4
}

TEST(Norm, BatchNormTrainMoments) {
  Rng r(12);
  const Tensor x = gaussian(Shape{4, 2, 3, 3}, 1.5, 2.0, r);
  auto p = make_norm(NormKind::BatchNorm, 2);
  p.eps = 1e-12;  // isolate the standardization from the eps regularizer
  const auto y = norm_forward(x, p, Mode::Train).y;
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (double e : y.plane(n, c)) m += e;
    m /= 36;
    for (std::size_t n = 0; n < 4; ++n)
      for (double e : y.plane(n, c)) v += (e - m) * (e - m);
    v /= 36;
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(Norm, GroupNormIndivisibleIsConfigError) {
  try {
    make_norm(NormKind::GroupNorm, 6, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config);
  }
}

TEST(Norm, EvalBatchNormIsAffine) {
  Rng r(13);
  auto p = make_norm(NormKind::BatchNorm, 2);
  p.running_mean = Tensor(Shape{1, 2, 1, 1}, {0.3, -0.7});
  p.running_var = Tensor(Shape{1, 2, 1, 1}, {2.0, 0.5});
  p.gamma = Tensor(Shape{1, 2, 1, 1}, {1.5, 0.8});
  p.beta = Tensor(Shape{1, 2, 1, 1}, {-0.1, 0.2});
  const Tensor x = gaussian(Shape{2, 2, 3, 3}, 0, 1, r);
  const Tensor y0 = norm_forward(zeros_like(x), p, Mode::Eval).y;
  const Tensor yx = norm_forward(x, p, Mode::Eval).y;
  for (double alpha : {0.5, -2.0, 3.0})
    for (double beta : {0.0, 1.0}) {
      const Tensor xin = map(x, [&](double v) { return alpha * v + beta; });
      const Tensor y1 = norm_forward(full(x.shape(), 1.0), p, Mode::Eval).y;
      const Tensor expect = add(add(mul_scalar(sub(yx, y0), alpha), mul_scalar(sub(y1, y0), beta)), y0);
      EXPECT_LT(max_abs_diff(norm_forward(xin, p, Mode::Eval).y, expect), 1e-12);
    }
  EXPECT_FALSE(norm_forward(x, p, Mode::Eval).running.has_value());
}

TEST(Norm, StatisticsScopesPerKind) {
  Rng r(14);
  const Tensor x = gaussian(Shape{2, 4, 3, 3}, 2.0, 3.0, r);
  // LN: per-sample over (c,h,w); IN: per (n,c); GN(2): per (n, channel pair).
  auto check_zero_mean = [&](NormKind kind, auto&& groups_of) {
    const auto y = norm_forward(x, make_norm(kind, 4, 2), Mode::Train).y;
    for (const auto& members : groups_of()) {
      double m = 0;
      std::size_t cnt = 0;
      for (auto [n, c] : members)
        for (double v : y.plane(n, c)) m += v, ++cnt;
      EXPECT_NEAR(m / cnt, 0.0, 1e-12) << to_string(kind);
    }
  };
  using G = std::vector<std::vector<std::pair<std::size_t, std::size_t>>>;
  check_zero_mean(NormKind::LayerNorm, [] { return G{{{0, 0}, {0, 1}, {0, 2}, {0, 3}}, {{1, 0}, {1, 1}, {1, 2}, {1, 3}}}; });
  check_zero_mean(NormKind::InstanceNorm, [] { return G{{{0, 0}}, {{1, 3}}}; });
  check_zero_mean(NormKind::GroupNorm, [] { return G{{{0, 0}, {0, 1}}, {{1, 2}, {1, 3}}}; });
}

TEST(Norm, BackwardZeroGrad) {
  Rng r(15);
  const Tensor x = gaussian(Shape{2, 2, 3, 3}, 0, 1, r);
  for (NormKind k : {NormKind::BatchNorm, NormKind::LayerNorm, NormKind::InstanceNorm, NormKind::GroupNorm}) {
    const auto g = norm_backward(x, make_norm(k, 2, 2), zeros_like(x), Mode::Train);
    EXPECT_EQ(g.grad_x, zeros_like(x));
    EXPECT_EQ(g.grad_gamma, zeros(Shape{1, 2, 1, 1}));
    EXPECT_EQ(g.grad_beta, zeros(Shape{1, 2, 1, 1}));
  }
}

TEST(Norm, BackwardMatchesFiniteDifferences) {
  Rng r(16);
  for (Mode mode : {Mode::Train, Mode::Eval})
    for (NormKind k : {NormKind::BatchNorm, NormKind::LayerNorm, NormKind::InstanceNorm, NormKind::GroupNorm}) {
      auto p = make_norm(k, 4, 2);
      p.gamma = uniform(p.gamma.shape(), 0.5, 1.5, r);
      p.beta = uniform(p.beta.shape(), -0.5, 0.5, r);
      p.running_mean = uniform(p.gamma.shape(), -0.5, 0.5, r);
      p.running_var = uniform(p.gamma.shape(), 0.5, 1.5, r);
      const Tensor x = gaussian(Shape{3, 4, 3, 2}, 0, 1, r);
      const Tensor u = gaussian(x.shape(), 0, 1, r);
      const auto g = norm_backward(x, p, u, mode);
      const Tensor nx = numeric_gradient([&](const Tensor& xx) { return dot(norm_forward(xx, p, mode).y, u); }, x, 1e-5);
      const Tensor ng = numeric_gradient(
          [&](const Tensor& gm) {
            auto q = p;
            q.gamma = gm;
            return dot(norm_forward(x, q, mode).y, u);
          },
          p.gamma, 1e-5);
      for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(relative_error(g.grad_x[i], nx[i]), 1e-5) << to_string(k);
      for (std::size_t i = 0; i < 4; ++i) EXPECT_LE(relative_error(g.grad_gamma[i], ng[i]), 1e-5) << to_string(k);
    }
}

TEST(Pool, ConstantInputIsFixedPoint) {
  for (double c : {-3.0, 0.0, 2.5}) {
    const Tensor x = full(Shape{1, 2, 4, 5}, c);
    EXPECT_EQ(window_maxpool(x, 3, 3), x);
    const Tensor avg = window_avgpool(x, 3, 3);
    for (double v : avg.data()) EXPECT_NEAR(v, c, 1e-15);
  }
}

TEST(Pool, SmallExamples) {
  const Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(window_maxpool(x, 3, 3), full(x.shape(), 4.0));
  EXPECT_DOUBLE_EQ(window_avgpool(kImage3x3, 3, 3).at(0, 0, 1, 1), 5.0);
  // Corner averages only the 4 in-bounds taps.
  EXPECT_DOUBLE_EQ(window_avgpool(kImage3x3, 3, 3).at(0, 0, 0, 0), (1 + 2 + 4 + 5) / 4.0);
}

TEST(Pool, EvenWindowIsConfigError) {
  try {
    window_maxpool(zeros(Shape{1, 1, 3, 3}), 2, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config);
  }
  EXPECT_THROW(window_avgpool(zeros(Shape{1, 1, 3, 3}), 3, 4), Error);
}

TEST(Pool, MatchesBruteForceAndMaxDominatesMean) {
  Rng r(17);
  for (std::size_t k : {1u, 3u, 5u}) {
    const Tensor x = gaussian(Shape{2, 2, 6, 7}, 0, 1, r);
    const Tensor mx = window_maxpool(x, k, k), av = window_avgpool(x, k, k);
    EXPECT_EQ(mx, oracle::naive_pool(x, k, true));
    EXPECT_LT(max_abs_diff(av, oracle::naive_pool(x, k, false)), 1e-14);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_GE(mx[i], av[i] - 1e-15);
  }
}

TEST(Pool, AvgBackwardIsAdjoint) {
  Rng r(18);
  const Tensor x = gaussian(Shape{2, 2, 5, 4}, 0, 1, r), u = gaussian(x.shape(), 0, 1, r);
  EXPECT_NEAR(dot(window_avgpool(x, 3, 3), u), dot(x, window_avgpool_backward(x.shape(), 3, 3, u)), 1e-12);
}

TEST(Linear, AdjointIdentity) {
  Rng r(19);
  const Tensor x = gaussian(Shape{3, 4, 2, 2}, 0, 1, r);
  const LinearParams p{gaussian(Shape{5, 16, 1, 1}, 0, 1, r), zeros(Shape{1, 5, 1, 1})};
  const Tensor y = linear_forward(x, p);
  const Tensor u = gaussian(y.shape(), 0, 1, r);
  const auto g = linear_backward(x, p, u);
  EXPECT_NEAR(dot(y, u), dot(x, g.grad_x), 1e-10);
  EXPECT_NEAR(dot(y, u), dot(p.weights, g.grad_weights), 1e-10);
}
