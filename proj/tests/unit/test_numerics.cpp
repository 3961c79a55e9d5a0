#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "kstl/core/rng.hpp"
#include "kstl/core/tensor.hpp"
#include "kstl/nn/gradcheck.hpp"
#include "kstl/nn/layers.hpp"
#include "kstl/nn/loss.hpp"
#include "kstl/nn/param_set.hpp"

using namespace kstl;
using namespace kstl::nn;

namespace {

// Direct six-nested-loop convolution, independent of the kernel's loop order
// and range clipping.
Tensor<double> reference_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                              std::size_t stride, std::size_t pad) {
  const long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long O = w.dim(0), K = w.dim(2);
  const long OH = (H + 2 * pad - K) / stride + 1, OW = (W + 2 * pad - K) / stride + 1;
  Tensor<double> y({std::size_t(N), std::size_t(O), std::size_t(OH), std::size_t(OW)});
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o)
      for (long oh = 0; oh < OH; ++oh)
        for (long ow = 0; ow < OW; ++ow) {
          double acc = b[o];
          for (long c = 0; c < C; ++c)
            for (long kh = 0; kh < K; ++kh)
              for (long kw = 0; kw < K; ++kw) {
                const long ih = oh * long(stride) + kh - long(pad), iw = ow * long(stride) + kw - long(pad);
                if (ih < 0 || iw < 0 || ih >= H || iw >= W) continue;
                acc += w.at(o, c, kh, kw) * x.at(n, c, ih, iw);
              }
          y.at(n, o, oh, ow) = acc;
        }
  return y;
}

}  // namespace

TEST(Tensor, ShapeMustMatchValueCount) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), ConfigError);
  EXPECT_THROW(Tensor<float>({2, 0}), ConfigError);
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
}

TEST(Conv2d, BoxSumOfOnes) {
  Tensor<double> x({1, 1, 3, 3}, 1.0), w({1, 1, 2, 2}, 1.0), b({1}, 0.0);
  auto y = conv2d_forward(x, w, b, {1, 0});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 4.0);
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(3);
  auto x = random_tensor({2, 1, 4, 5}, rng);
  Tensor<double> w({1, 1, 1, 1}, 1.0), b({1}, 0.0);
  EXPECT_EQ(conv2d_forward(x, w, b, {1, 0}), x);
}

TEST(Conv2d, MatchesBruteForceLoops) {
  Rng rng(11);
  auto x = random_tensor({1, 2, 5, 5}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  for (auto [stride, pad] : std::vector<std::pair<std::size_t, std::size_t>>{{1, 0}, {1, 1}, {2, 1}, {2, 0}, {1, 2}}) {
    auto y = conv2d_forward(x, w, b, {stride, pad});
    auto ref = reference_conv(x, w, b, stride, pad);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12) << "stride " << stride << " pad " << pad;
  }
}

TEST(Conv2d, OutputSizeFormula) {
  Tensor<double> x({1, 1, 7, 6}), w({1, 1, 3, 3}), b({1});
  auto y = conv2d_forward(x, w, b, {2, 1});
  EXPECT_EQ(y.dim(2), (7u + 2 - 3) / 2 + 1);
  EXPECT_EQ(y.dim(3), (6u + 2 - 3) / 2 + 1);
}

TEST(Conv2d, ShapeMismatchNamesDimensions) {
  Tensor<double> x({1, 2, 4, 4}), w({1, 3, 3, 3}), b({1});
  try {
    conv2d_forward(x, w, b, {1, 0});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("2 channels"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("expects 3"), std::string::npos);
  }
  Tensor<double> small({1, 1, 2, 2}), big({1, 1, 3, 3}), b1({1});
  EXPECT_THROW(conv2d_forward(small, big, b1, {1, 0}), ConfigError);
}

TEST(Conv2d, ZeroGradOutGivesZeroGradients) {
  Rng rng(5);
  auto x = random_tensor({2, 2, 4, 4}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  Tensor<double> gy({2, 3, 4, 4});
  auto g = conv2d_backward(gy, x, w, {1, 1});
  for (const auto* t : {&g.input, &g.weight, &g.bias})
    for (double v : t->values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, BiasGradientIsSumOfGradOut) {
  Rng rng(6);
  auto x = random_tensor({2, 2, 4, 4}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto gy = random_tensor({2, 3, 4, 4}, rng);
  auto g = conv2d_backward(gy, x, w, {1, 1});
  for (std::size_t o = 0; o < 3; ++o) {
    double s = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 16; ++i) s += gy.at(n, o, i / 4, i % 4);
    EXPECT_NEAR(g.bias[o], s, 1e-12);
  }
}

TEST(Conv2d, BackwardMatchesFiniteDifferencesOnEveryWeight) {
  Rng rng(8);
  auto x = random_tensor({1, 2, 5, 5}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto r = random_tensor({1, 3, 5, 5}, rng);
  auto g = conv2d_backward(r, x, w, {1, 1});
  const double h = 1e-5;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double orig = w[i];
    w[i] = orig + h;
    const double lp = contract(conv2d_forward(x, w, b, {1, 1}), r);
    w[i] = orig - h;
    const double lm = contract(conv2d_forward(x, w, b, {1, 1}), r);
    w[i] = orig;
    EXPECT_LT(gradient_relative_error(g.weight[i], (lp - lm) / (2 * h)), 1e-6);
  }
}

TEST(BatchNorm, TrainModeNormalizes) {
  Rng rng(9);
  auto x = random_tensor({8, 3, 4, 4}, rng, 3.0);
  for (auto& v : x.values()) v += 5.0;
  Tensor<double> gamma({3}, 1.0), beta({3}, 0.0), rm({3}, 0.0), rv({3}, 1.0);
  auto y = batchnorm_forward(x, gamma, beta, Mode::train, rm, rv, {0.1, 1e-5});
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, sq = 0;
    for (std::size_t n = 0; n < 8; ++n)
      for (std::size_t i = 0; i < 16; ++i) s += y.at(n, c, i / 4, i % 4);
    const double mean = s / 128;
    for (std::size_t n = 0; n < 8; ++n)
      for (std::size_t i = 0; i < 16; ++i) sq += std::pow(y.at(n, c, i / 4, i % 4) - mean, 2);
    EXPECT_LT(std::abs(mean), 1e-6);
    EXPECT_LT(std::abs(std::sqrt(sq / 128) - 1.0), 1e-3);
  }
  // Running stats moved towards the batch statistics.
  for (std::size_t c = 0; c < 3; ++c) EXPECT_GT(rm[c], 0.3);
}

TEST(BatchNorm, EvalModeIsDeterministicAndLeavesStats) {
  Rng rng(10);
  auto x = random_tensor({4, 2, 3, 3}, rng);
  Tensor<double> gamma({2}, 1.5), beta({2}, 0.2), rm({2}, 0.1), rv({2}, 2.0);
  auto y1 = batchnorm_forward(x, gamma, beta, Mode::eval, rm, rv, {});
  auto y2 = batchnorm_forward(x, gamma, beta, Mode::eval, rm, rv, {});
  EXPECT_EQ(y1, y2);
  EXPECT_EQ(rm[0], 0.1);
  EXPECT_EQ(rv[1], 2.0);
}

TEST(BatchNorm, SingleSampleTrainBatchIsRejected) {
  Tensor<double> x({1, 4}), g({4}, 1.0), b({4}), rm({4}), rv({4}, 1.0);
  EXPECT_THROW(batchnorm_forward(x, g, b, Mode::train, rm, rv, {}), ConfigError);
  EXPECT_NO_THROW(batchnorm_forward(x, g, b, Mode::eval, rm, rv, {}));
}

TEST(Relu, Values) {
  Tensor<double> x({3}, std::vector<double>{-3, 0, 5});
  EXPECT_EQ(relu_forward(x).values()[0], 0.0);
  EXPECT_EQ(relu_forward(x).values()[1], 0.0);
  EXPECT_EQ(relu_forward(x).values()[2], 5.0);
}

TEST(Linear, IdentityPlusBias) {
  Tensor<double> x({1, 2}, std::vector<double>{1, 2});
  Tensor<double> w({2, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor<double> b({2}, std::vector<double>{1, 1});
  auto y = linear_forward(x, w, b);
  EXPECT_EQ(y[0], 2.0);
  EXPECT_EQ(y[1], 3.0);
}

TEST(Dropout, EvalIsIdentityAndRateIsValidated) {
  Rng rng(1);
  auto x = random_tensor({3, 4}, rng);
  EXPECT_EQ(dropout_forward(x, 0.5, Mode::eval), x);
  EXPECT_THROW(dropout_forward(x, 1.0, Mode::eval), ConfigError);
  EXPECT_THROW(dropout_mask<double>(4, 1.5, rng), ConfigError);
  EXPECT_THROW(dropout_forward(x, 0.5, Mode::train), UsageError);
}

TEST(Dropout, InvertedScalingPreservesExpectation) {
  Rng rng(derive_seed(42, "dropout-expectation"));
  const std::size_t trials = 10000;
  Tensor<double> x({1, 1}, 3.0);
  double sum = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    auto mask = dropout_mask<double>(1, 0.5, rng);
    sum += dropout_forward(x, 0.5, Mode::train, &mask)[0];
  }
  EXPECT_NEAR(sum / trials, 3.0, 0.02 * 3.0);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogC) {
  Tensor<double> z({2, 6}, 0.25);
  const std::vector<int> labels{1, 4};
  EXPECT_NEAR(softmax_cross_entropy<double>(z, labels).loss, std::log(6.0), 1e-12);
  EXPECT_NEAR(softmax_cross_entropy<double>(z, labels).loss, 1.791759, 1e-6);
}

TEST(SoftmaxCrossEntropy, SaturatedCorrectPrediction) {
  Tensor<double> z({1, 6});
  z[2] = 100.0;
  const std::vector<int> labels{2};
  EXPECT_LT(softmax_cross_entropy<double>(z, labels).loss, 1e-30);
}

TEST(SoftmaxCrossEntropy, LabelOutOfRangeNamesSample) {
  Tensor<double> z({3, 6});
  const std::vector<int> labels{0, 6, 1};
  try {
    softmax_cross_entropy<double>(z, labels);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("sample 1"), std::string::npos);
  }
}

TEST(SoftmaxCrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  auto z = random_tensor({4, 6}, rng, 2.0);
  const std::vector<int> labels{5, 0, 2, 2};
  auto g = softmax_cross_entropy<double>(z, labels).grad_logits;
  const double h = 1e-5;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double o = z[i];
    z[i] = o + h;
    const double lp = softmax_cross_entropy<double>(z, labels).loss;
    z[i] = o - h;
    const double lm = softmax_cross_entropy<double>(z, labels).loss;
    z[i] = o;
    EXPECT_LT(gradient_relative_error(g[i], (lp - lm) / (2 * h)), 1e-6);
  }
}

TEST(Sgd, PlainStep) {
  ParamSet<double> p;
  p.add("theta", Tensor<double>({1}, 1.0));
  Gradients<double> g;
  g.add("theta", Tensor<double>({1}, 1.0));
  sgd_momentum_step(p, g, 0.1, 0.0);
  EXPECT_NEAR(p.value("theta")[0], 0.9, 1e-15);
}

TEST(Sgd, MomentumRecursionOnQuadratic) {
  // f = theta^2 / 2, so g = theta.
  ParamSet<double> p;
  p.add("theta", Tensor<double>({1}, 1.0));
  auto step = [&] {
    Gradients<double> g;
    g.add("theta", Tensor<double>({1}, p.value("theta")[0]));
    sgd_momentum_step(p, g, 0.1, 0.9);
  };
  step();
  EXPECT_NEAR(p.value("theta")[0], 0.9, 1e-15);
  step();
  EXPECT_NEAR(p.velocity("theta")[0], 1.8, 1e-15);
  EXPECT_NEAR(p.value("theta")[0], 0.72, 1e-15);
}

TEST(Sgd, ZeroGradientStillAppliesDecayedVelocity) {
  ParamSet<double> p;
  p.add("theta", Tensor<double>({1}, 1.0));
  p.velocity("theta")[0] = 2.0;
  Gradients<double> g;
  g.add("theta", Tensor<double>({1}, 0.0));
  sgd_momentum_step(p, g, 0.1, 0.9);
  EXPECT_NEAR(p.value("theta")[0], 1.0 - 0.1 * 0.9 * 2.0, 1e-15);
  EXPECT_EQ(p.parameter_count(), 1u);
}

TEST(Sgd, NameMismatchListsSymmetricDifference) {
  ParamSet<double> p;
  p.add("a", Tensor<double>({1}));
  p.add("b", Tensor<double>({1}));
  Gradients<double> g;
  g.add("a", Tensor<double>({1}));
  g.add("c", Tensor<double>({1}));
  try {
    sgd_momentum_step(p, g, 0.1, 0.9);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("b, c"), std::string::npos);
  }
}

TEST(GradCheck, EveryLayerPassesInDoublePrecision) {
  for (const auto& r : run_gradcheck_suite()) {
    EXPECT_GE(r.coordinates_checked, 10u) << r.layer;
    EXPECT_LT(r.worst_relative_error, 1e-5) << r.layer;
  }
}
