#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "kstl/transfer/experiment.hpp"

using namespace kstl;
using namespace kstl::transfer;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  synth::SynthDataset synth;
  data::PreparedData a, b, generic;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture f;
    synth::SynthSpec s;
    s.images_per_class_per_view = 6;
    s.edge = 28;
    f.synth = synth::generate(s);
    data::PipelineConfig cfg;
    cfg.per_class_target = 20;
    f.a = data::prepare(f.synth.a, data::dataset_a_keys(), data::Subset::mixed, cfg, 3);
    f.b = data::prepare(f.synth.b, data::dataset_b_keys(), data::Subset::mixed, cfg, 3);
    f.generic = data::prepare(synth::generate_generic(12, 3, 28, 5), synth::class_keys_for("G", 12),
                              data::Subset::mixed, cfg, 3);
    return f;
  }();
  return f;
}

StageSpec quick(std::size_t epochs = 2, TrainConfig base = hetl_preset()) {
  StageSpec s;
  s.config = base;
  s.config.epochs = epochs;
  s.seed = 11;
  return s;
}

const StageResult<float>& stage0() {
  static const StageResult<float> r =
      run_stage0_pretrain<float>(nn::desk_architecture(12), fixture().generic, quick());
  return r;
}

const StageResult<float>& hetl_a() {
  static const StageResult<float> r =
      run_hetl<float>(&stage0().checkpoint, nn::desk_architecture(6), fixture().a, quick());
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(TrainConfig, PresetsAreVerbatim) {
  const auto h = hetl_preset();
  EXPECT_EQ(h.batch_size, 24u);
  EXPECT_DOUBLE_EQ(h.learning_rate, 0.001);
  EXPECT_DOUBLE_EQ(h.momentum, 0.9);
  EXPECT_DOUBLE_EQ(h.dropout, 0.5);
  const auto o = hotl_preset();
  EXPECT_DOUBLE_EQ(o.learning_rate, 0.01);
  EXPECT_EQ(o.epochs, 30u);
  EXPECT_DOUBLE_EQ(o.momentum, 0.9);
  EXPECT_EQ(nlohmann::json(h).get<TrainConfig>(), h);
  EXPECT_THROW(train_config_from_json({{"batch_size", 1}}, h), ConfigError);
}

TEST(ClassMapping, PositionalAndExplicit) {
  const auto& a = data::dataset_a_keys();
  const auto& b = data::dataset_b_keys();
  const auto m = positional_mapping(a, b);
  EXPECT_EQ(m.at("WD"), "CAR");
  EXPECT_EQ(m.at("AU"), "CAR2");
  EXPECT_EQ(remap_keys(a, b, m), b);
  auto swapped = m;
  swapped["WD"] = "CAR2";
  swapped["AU"] = "CAR";
  const auto k = remap_keys(a, b, swapped);
  EXPECT_EQ(k[1], "AU");
  EXPECT_EQ(k[2], "WD");
  swapped["AU"] = "CAR2";
  EXPECT_THROW(remap_keys(a, b, swapped), ConfigError);
}

TEST(Stages, Stage0CheckpointCarriesBackbone) {
  const auto& c = stage0().checkpoint;
  EXPECT_EQ(c.meta.stage, "stage0");
  EXPECT_EQ(c.meta.class_keys.size(), 12u);
  EXPECT_NE(c.find_param("backbone.block0.conv.weight"), nullptr);
  EXPECT_EQ(stage0().outcome.log.size(), 2u);
  EXPECT_EQ(stage0().outcome.trace.blur, 0u);
}

TEST(Stages, HetlNamesAreBackboneUnionNewHead) {
  std::set<std::string> want;
  for (const auto& p : stage0().checkpoint.params)
    if (p.name.starts_with("backbone.")) want.insert(p.name);
  const nn::Model<float> head_only(nn::desk_architecture(6), 0);
  for (const auto& n : head_only.params().names())
    if (n.starts_with("head.")) want.insert(n);
  std::set<std::string> got;
  for (const auto& p : hetl_a().checkpoint.params) got.insert(p.name);
  EXPECT_EQ(got, want);
  EXPECT_EQ(hetl_a().checkpoint.meta.stage, "hetl");
  EXPECT_EQ(hetl_a().checkpoint.meta.class_keys, data::dataset_a_keys());
  EXPECT_EQ(hetl_a().checkpoint.meta.extra["augmentation"], "geometric+blur");
  EXPECT_GT(hetl_a().outcome.trace.blur, 0u);
}

TEST(Stages, HetlStartsFromStage0Backbone) {
  // One training step at a tiny rate keeps the backbone close to stage0; a
  // random init would be far away.
  StageSpec s = quick(1);
  s.config.learning_rate = 1e-9;
  auto r = run_hetl<float>(&stage0().checkpoint, nn::desk_architecture(6), fixture().a, s);
  const auto& src = stage0().checkpoint.find_param("backbone.block1.conv.weight")->value;
  const auto& got = r.model.params().value("backbone.block1.conv.weight");
  for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], src[i], 1e-5);
}

TEST(Stages, HetlRejectsBackboneMismatchBeforeTraining) {
  auto arch = nn::desk_architecture(6);
  arch.backbone.back().out_channels = 24;
  EXPECT_THROW(run_hetl<float>(&stage0().checkpoint, arch, fixture().a, quick()), ConfigError);
}

TEST(Stages, HotlContract) {
  std::vector<std::string> reads;
  StageSpec s = quick(2, hotl_preset());
  s.access_log = &reads;
  auto r = run_hotl<float>(hetl_a().checkpoint, fixture().b, s);
  EXPECT_EQ(r.initial_parameter_count, hetl_a().checkpoint.parameter_count());
  EXPECT_EQ(r.model.parameter_count(), hetl_a().checkpoint.parameter_count());
  EXPECT_TRUE(r.velocities_zero_at_start);
  EXPECT_EQ(r.outcome.trace.blur, 0u);
  EXPECT_GT(r.outcome.trace.samples, 0u);
  EXPECT_EQ(r.class_keys, data::dataset_b_keys());
  EXPECT_EQ(r.checkpoint.meta.stage, "hotl");
  EXPECT_EQ(r.checkpoint.meta.arch_hash, hetl_a().checkpoint.meta.arch_hash);
  // No training read touched a test fragment.
  std::set<std::string> test_ids(fixture().b.split.test.begin(), fixture().b.split.test.end());
  ASSERT_FALSE(reads.empty());
  for (const auto& id : reads) ASSERT_FALSE(test_ids.contains(id)) << id;
}

TEST(Stages, HotlRefusesNewLayersAndWrongSource) {
  auto bigger = hetl_a().checkpoint.meta.arch;
  bigger.head.insert(bigger.head.begin(), nn::DenseSpec{16, true, true, 0.5});
  try {
    run_hotl<float>(hetl_a().checkpoint, fixture().b, quick(), &bigger);
    FAIL();
  } catch (const StageContractError& e) {
    EXPECT_EQ(e.category(), "stage-contract");
    EXPECT_NE(std::string(e.what()).find("no layers added"), std::string::npos);
  }
  EXPECT_THROW(run_hotl<float>(stage0().checkpoint, fixture().b, quick()), StageContractError);
}

TEST(Stages, TestFragmentsAreGuarded) {
  auto d = fixture().a;
  d.train.push_back(d.test.front());
  EXPECT_THROW(run_scratch<float>(nn::desk_architecture(6), d, quick(1)), StageContractError);
}

TEST(Stages, DivergenceNamesTheStep) {
  StageSpec s = quick(3);
  s.config.learning_rate = 1e30;
  try {
    run_scratch<double>(nn::desk_architecture(6), fixture().a, s);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
  }
}

TEST(Stages, ImportedCheckpointRestores) {
  const auto dir = fs::temp_directory_path() / "kstl_import";
  fs::create_directories(dir);
  nn::write_checkpoint_file(dir / "a.kstl", hetl_a().checkpoint);
  const auto c = nn::read_checkpoint_file(dir / "a.kstl");
  nn::Model<float> m(c.meta.arch, 1);
  EXPECT_NO_THROW(nn::restore(m, c));
  EXPECT_EQ(m.params().value("head.fc2.weight"), hetl_a().model.params().value("head.fc2.weight"));
}

TEST(Stages, ScratchStartsFromSeededInit) {
  StageSpec s = quick(1);
  s.config.learning_rate = 1e-12;
  s.config.momentum = 0;
  auto r = run_scratch<double>(nn::desk_architecture(6), fixture().a, s);
  const nn::Model<double> ref(nn::desk_architecture(6), derive_seed(s.seed, "init/scratch"));
  const auto& w = r.model.params().value("backbone.block0.conv.weight");
  const auto& w0 = ref.params().value("backbone.block0.conv.weight");
  for (std::size_t i = 0; i < w.size(); ++i) ASSERT_NEAR(w[i], w0[i], 1e-9);
}

namespace {

ExperimentConfig tiny_matrix() {
  ExperimentConfig c;
  c.synth.images_per_class_per_view = 6;
  c.synth.edge = 28;
  c.pipeline.per_class_target = 20;
  c.stage0.images_per_class_per_view = 3;
  c.stage0.train.epochs = 1;
  c.hetl.epochs = c.hotl.epochs = c.scratch.epochs = 1;
  c.subsets = {data::Subset::surface, data::Subset::mixed};
  c.runs = 2;
  return c;
}

}  // namespace

TEST(Matrix, TableShapeAndByteDeterminism) {
  const auto c = tiny_matrix();
  const auto d = load_experiment_data(c);
  const auto base = fs::temp_directory_path() / "kstl_matrix_det";
  fs::remove_all(base);
  const auto r1 = run_experiment_matrix(c, d, base / "one");
  run_experiment_matrix(c, d, base / "two");
  EXPECT_EQ(r1.table.size(), 5u * 2);
  for (const auto& cell : r1.table) {
    ASSERT_TRUE(cell.report.has_value()) << cell.error;
    EXPECT_EQ(cell.report->n_runs(), 2u);
  }
  EXPECT_EQ(r1.runs.size(), 5u * 2 * 2);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(base / "one")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), base / "one");
    ASSERT_EQ(slurp(e.path()), slurp(base / "two" / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 50u);
  EXPECT_TRUE(fs::exists(base / "one" / "runs" / "mixed" / "run2" / "hetl_hotl_b" / "predictions.csv"));
  EXPECT_TRUE(fs::exists(base / "one" / "report" / "table.txt"));
}

TEST(Matrix, SingleRunFlagsAndFailedCellsAreRecorded) {
  auto c = tiny_matrix();
  c.runs = 1;
  c.subsets = {data::Subset::section};
  auto d = load_experiment_data(c);
  // Dataset B loses a class entirely, so every B cell fails while A cells run.
  std::erase_if(d.b, [](const data::ImageRecord& r) { return r.class_key == "CYS"; });
  const auto r = run_experiment_matrix(c, d);
  ASSERT_EQ(r.table.size(), 5u);
  for (const auto& cell : r.table) {
    if (cell.dataset == "A") {
      ASSERT_TRUE(cell.report.has_value());
      EXPECT_NE(cell.report->flags.front().find("single run"), std::string::npos);
    } else {
      EXPECT_FALSE(cell.report.has_value());
      EXPECT_NE(cell.error.find("CYS"), std::string::npos) << cell.error;
    }
  }
}

TEST(Matrix, ConfigJsonRoundTrip) {
  auto c = tiny_matrix();
  c.strategies = {Strategy::two_step_b, Strategy::no_tl_b};
  const nlohmann::json j = c;
  EXPECT_EQ(nlohmann::json(j.get<ExperimentConfig>()), j);
  EXPECT_THROW(parse_strategy("nope"), ConfigError);
}

TEST(Matrix, ThreadCapFromEnvironment) {
  setenv("STAGE_TRANSFER_THREADS", "2", 1);
  EXPECT_EQ(worker_count(8), 2u);
  EXPECT_EQ(worker_count(1), 1u);
  unsetenv("STAGE_TRANSFER_THREADS");
  EXPECT_EQ(worker_count(3), 3u);
}
