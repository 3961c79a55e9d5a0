#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "kstl/nn/gradcheck.hpp"
#include "kstl/nn/loss.hpp"
#include "kstl/nn/model.hpp"

using namespace kstl;
using namespace kstl::nn;

namespace {

// Parameter count derived from the layer arithmetic, not from the model.
std::size_t counted_parameters(const ArchitectureConfig& a) {
  std::size_t n = 0, in = a.in_channels;
  for (const auto& b : a.backbone) {
    n += b.out_channels * in * 9 + b.out_channels;
    if (b.batch_norm) n += 2 * b.out_channels;
    in = b.out_channels;
  }
  for (std::size_t j = 0; j < a.head.size(); ++j) {
    n += a.head[j].width * in + a.head[j].width;
    if (j + 1 < a.head.size() && a.head[j].batch_norm) n += 2 * a.head[j].width;
    in = a.head[j].width;
  }
  return n;
}

}  // namespace

// 3->8 conv (224) + bn (16), 8->16 conv (1168) + bn (32), 16->32 conv (4640)
// + bn (64), fc 32->64 (2112) + bn (128), fc 64->32 (2080) + bn (64), fc 32->6 (198).
constexpr std::size_t kDeskParameterCount = 10726;

TEST(Model, DeskParameterCountIsDocumentedConstant) {
  Model<float> m(desk_architecture(), 1);
  EXPECT_EQ(counted_parameters(desk_architecture()), kDeskParameterCount);
  EXPECT_EQ(m.parameter_count(), kDeskParameterCount);
}

TEST(Model, FullScaleHeadPresetIsConstructible) {
  ArchitectureConfig a;
  a.input_edge = 8;
  a.backbone = {{768, true, true}};
  a.head = full_scale_head();
  Model<float> m(a, 3);
  ASSERT_EQ(a.head.size(), 4u);
  EXPECT_EQ(a.head[0].width, 768u);
  EXPECT_EQ(a.head[1].width, 256u);
  EXPECT_EQ(a.head[2].width, 128u);
  EXPECT_EQ(a.head[3].width, 6u);
  EXPECT_DOUBLE_EQ(a.head[0].dropout, 0.5);
  EXPECT_EQ(a.penultimate_width(), 128u);
  EXPECT_EQ(m.parameter_count(), counted_parameters(a));
  EXPECT_EQ(m.params().value("head.fc0.weight").shape(), (Shape{768, 768}));
}

TEST(Model, ParameterNamesAreUniqueDottedPaths) {
  Model<float> m(desk_architecture(), 1);
  const auto names = m.params().names();
  std::set<std::string> unique(names.begin(), names.end());
  EXPECT_EQ(unique.size(), names.size());
  EXPECT_TRUE(m.params().contains("backbone.block0.conv.weight"));
  EXPECT_TRUE(m.params().contains("backbone.block2.bn.gamma"));
  EXPECT_TRUE(m.params().contains("head.fc2.bias"));
  EXPECT_TRUE(m.state().buffers.contains("head.bn1.running_var"));
}

TEST(Model, InitializationIsSeeded) {
  Model<float> a(desk_architecture(), 17), b(desk_architecture(), 17), c(desk_architecture(), 18);
  EXPECT_EQ(a.params().value("backbone.block1.conv.weight"), b.params().value("backbone.block1.conv.weight"));
  EXPECT_NE(a.params().value("backbone.block1.conv.weight"), c.params().value("backbone.block1.conv.weight"));
  for (float v : a.params().value("head.fc0.bias").values()) EXPECT_EQ(v, 0.0f);
  for (float v : a.params().value("head.bn0.gamma").values()) EXPECT_EQ(v, 1.0f);
}

TEST(Model, EvalForwardIsPure) {
  Model<float> m(desk_architecture(), 2);
  Rng rng(4);
  auto x = random_tensor({5, 3, 16, 16}, rng).cast<float>();
  auto y1 = m.forward(x, Mode::eval);
  auto y2 = m.forward(x, Mode::eval);
  EXPECT_EQ(y1, y2);
  EXPECT_EQ(y1.shape(), (Shape{5, 6}));
}

TEST(Model, WrongInputEdgeIsRejected) {
  Model<float> m(desk_architecture(), 2);
  EXPECT_THROW(m.forward(Tensor<float>({2, 3, 15, 15}), Mode::eval), ConfigError);
}

TEST(Model, BackwardBeforeForwardIsUsageError) {
  Model<float> m(desk_architecture(), 2);
  EXPECT_THROW(m.backward(Tensor<float>({2, 6})), UsageError);
}

TEST(Model, LossAtUniformInitIsLogSix) {
  Model<float> m(desk_architecture(), 9);
  m.params().value("head.fc2.weight").fill(0.0f);
  m.params().value("head.fc2.bias").fill(0.0f);
  Rng rng(1);
  auto x = random_tensor({8, 3, 16, 16}, rng).cast<float>();
  const std::vector<int> labels{0, 1, 2, 3, 4, 5, 0, 1};
  Rng dr(3);
  const float loss = softmax_cross_entropy<float>(m.forward(x, Mode::train, &dr), labels).loss;
  EXPECT_NEAR(loss, std::log(6.0), 1e-6);
}

TEST(Model, FeaturesHavePenultimateWidth) {
  Model<float> m(desk_architecture(), 2);
  Rng rng(4);
  auto x = random_tensor({3, 3, 16, 16}, rng).cast<float>();
  EXPECT_EQ(m.features(x).shape(), (Shape{3, 32}));
}

TEST(Model, OverfitsOneBatch) {
  ArchitectureConfig a = desk_architecture();
  Model<float> m(a, 21);
  m.set_dropout(0.0);
  Rng rng(22);
  auto x = random_tensor({24, 3, 16, 16}, rng).cast<float>();
  std::vector<int> labels(24);
  for (std::size_t i = 0; i < 24; ++i) labels[i] = static_cast<int>(i % 6);
  float loss = 1e9f;
  int steps = 0;
  for (; steps < 500 && loss >= 0.01f; ++steps) {
    auto r = softmax_cross_entropy<float>(m.forward(x, Mode::train), labels);
    loss = r.loss;
    sgd_momentum_step(m.params(), m.backward(r.grad_logits), 0.01, 0.9);
  }
  EXPECT_LT(loss, 0.01f) << "after " << steps << " steps";
  EXPECT_EQ(m.parameter_count(), kDeskParameterCount);
}
