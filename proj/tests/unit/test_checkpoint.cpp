#include <gtest/gtest.h>

#include "kstl/nn/checkpoint.hpp"
#include "kstl/nn/gradcheck.hpp"

using namespace kstl;
using namespace kstl::nn;

namespace {

Checkpoint trained_checkpoint() {
  Model<float> m(desk_architecture(), 5);
  // Give velocities and running stats non-trivial values.
  Rng rng(6);
  auto x = random_tensor({6, 3, 16, 16}, rng).cast<float>();
  auto logits = m.forward(x, Mode::train, &rng);
  const std::vector<int> labels{0, 1, 2, 3, 4, 5};
  sgd_momentum_step(m.params(), m.backward(softmax_cross_entropy<float>(logits, labels).grad_logits), 0.01, 0.9);
  return make_checkpoint(m, "hetl", 5, {"WW", "CAR", "CAR2", "STR", "BRU", "CYS"}, {{"dataset", "A"}});
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto bytes = save_checkpoint(trained_checkpoint());
  const auto loaded = load_checkpoint(bytes);
  EXPECT_EQ(save_checkpoint(loaded), bytes);
  EXPECT_EQ(loaded.meta.stage, "hetl");
  EXPECT_EQ(loaded.meta.class_keys.size(), 6u);
  EXPECT_EQ(loaded.meta.extra.at("dataset"), "A");
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "KSTL");
}

TEST(Checkpoint, RestoredModelMatchesBitForBit) {
  Model<float> src(desk_architecture(), 5);
  src.params().velocity("head.fc1.weight")[3] = 0.125f;
  src.state().buffers.at("backbone.block0.bn.running_mean")[1] = -0.5f;
  const auto c = load_checkpoint(save_checkpoint(make_checkpoint(src, "stage0", 1, {})));
  Model<float> dst(desk_architecture(), 99);
  restore(dst, c);
  for (const auto& e : src.params().values()) EXPECT_EQ(e.value, dst.params().value(e.name)) << e.name;
  for (const auto& e : src.params().velocities()) EXPECT_EQ(e.value, dst.params().velocity(e.name)) << e.name;
  for (const auto& e : src.state().buffers) EXPECT_EQ(e.value, dst.state().buffers.at(e.name)) << e.name;
}

TEST(Checkpoint, DoublePrecisionRoundTrip) {
  Model<double> m(desk_architecture(), 3);
  const auto bytes = save_checkpoint(make_checkpoint(m, "scratch", 3, {}));
  EXPECT_EQ(save_checkpoint(load_checkpoint(bytes)), bytes);
  EXPECT_EQ(load_checkpoint(bytes).params.front().dtype, DType::f64);
}

TEST(Checkpoint, ArchMismatchReportsBothHashes) {
  const auto c = trained_checkpoint();
  ArchitectureConfig other = desk_architecture();
  other.head = make_head({48, 32}, 6);
  Model<float> m(other, 1);
  try {
    restore(m, c);
    FAIL();
  } catch (const ArchMismatchError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(c.meta.arch_hash), std::string::npos);
    EXPECT_NE(msg.find(arch_hash(other)), std::string::npos);
    EXPECT_EQ(e.category(), "checkpoint-arch");
  }
  // Same backbone: the backbone-only restore is allowed.
  EXPECT_NO_THROW(restore_backbone(m, c));
}

TEST(Checkpoint, DropoutRateDoesNotChangeArchHash) {
  ArchitectureConfig a = desk_architecture(), b = desk_architecture();
  b.head[0].dropout = 0.1;
  EXPECT_EQ(arch_hash(a), arch_hash(b));
  b.head[0].width = 65;
  EXPECT_NE(arch_hash(a), arch_hash(b));
  EXPECT_EQ(backbone_hash(a), backbone_hash(b));
}

TEST(Checkpoint, CorruptionIsDetectedWithDistinctErrors) {
  auto bytes = save_checkpoint(trained_checkpoint());

  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x01;
  EXPECT_THROW(load_checkpoint(flipped), ChecksumError);

  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(load_checkpoint(magic), BadMagicError);

  auto version = bytes;
  version[4] = 9;
  EXPECT_THROW(load_checkpoint(version), UnsupportedVersionError);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 10);
  EXPECT_THROW(load_checkpoint(truncated), TruncatedCheckpointError);
  truncated.resize(10);
  EXPECT_THROW(load_checkpoint(truncated), TruncatedCheckpointError);
}

TEST(Checkpoint, EveryPayloadByteIsCovered) {
  const auto bytes = save_checkpoint(trained_checkpoint());
  // Flip a spread of payload bytes; each must be caught by the checksum.
  for (std::size_t i = 16; i + 4 < bytes.size(); i += 997) {
    auto b = bytes;
    b[i] ^= 0x80;
    EXPECT_THROW(load_checkpoint(b), ChecksumError) << "byte " << i;
  }
}
