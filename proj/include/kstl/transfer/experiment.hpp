#pragma once

#include <atomic>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "kstl/data/pipeline.hpp"
#include "kstl/metrics/table.hpp"
#include "kstl/synth/generator.hpp"
#include "kstl/transfer/run_dir.hpp"

namespace kstl::transfer {

enum class Strategy { no_tl_a, no_tl_b, hetl_a, hetl_b, two_step_b };

inline constexpr std::array<Strategy, 5> kStrategies{Strategy::no_tl_a, Strategy::no_tl_b, Strategy::hetl_a,
                                                    Strategy::hetl_b, Strategy::two_step_b};

inline std::string strategy_label(Strategy s) {
  switch (s) {
    case Strategy::no_tl_a:
    case Strategy::no_tl_b: return "No TL";
    case Strategy::hetl_a:
    case Strategy::hetl_b: return "HeTL only";
    default: return "HeTL+HoTL";
  }
}

inline std::string strategy_dataset(Strategy s) {
  return s == Strategy::no_tl_a || s == Strategy::hetl_a ? "A" : "B";
}

inline std::string strategy_slug(Strategy s) {
  switch (s) {
    case Strategy::no_tl_a: return "no_tl_a";
    case Strategy::no_tl_b: return "no_tl_b";
    case Strategy::hetl_a: return "hetl_a";
    case Strategy::hetl_b: return "hetl_b";
    default: return "hetl_hotl_b";
  }
}

inline Strategy parse_strategy(const std::string& s) {
  for (auto k : kStrategies)
    if (strategy_slug(k) == s) return k;
  throw ConfigError("unknown strategy '" + s + "' (expected no_tl_a|no_tl_b|hetl_a|hetl_b|hetl_hotl_b)");
}

struct Stage0Config {
  std::size_t classes = 12;
  std::size_t images_per_class_per_view = 20;
  TrainConfig train = hetl_preset();
  std::string import_checkpoint;  // non-empty: skip pretraining and load this file
};

struct ExperimentConfig {
  synth::SynthSpec synth;
  std::string manifest_a;  // both set: real data instead of the synthetic benchmark
  std::string manifest_b;
  nn::ArchitectureConfig arch = nn::desk_architecture(6);
  data::PipelineConfig pipeline;
  Stage0Config stage0;
  TrainConfig hetl = hetl_preset();
  TrainConfig hotl = hotl_preset();
  TrainConfig scratch = hetl_preset();
  data::AugmentPolicy scratch_policy = data::AugmentPolicy::geometric;
  ClassMapping mapping;  // B key -> A key; empty: positional
  std::vector<Strategy> strategies{kStrategies.begin(), kStrategies.end()};
  std::vector<data::Subset> subsets{data::Subset::surface, data::Subset::section, data::Subset::mixed};
  std::size_t runs = 5;
  std::uint64_t base_seed = 1;
  std::string precision = "float";
  std::size_t threads = 1;

  std::vector<std::size_t> head_hidden() const {
    std::vector<std::size_t> h;
    for (std::size_t i = 0; i + 1 < arch.head.size(); ++i) h.push_back(arch.head[i].width);
    return h;
  }

  void validate() const {
    arch.validate();
    hetl.validate();
    hotl.validate();
    scratch.validate();
    stage0.train.validate();
    if (runs == 0) throw ConfigError("runs must be at least 1");
    if (strategies.empty()) throw ConfigError("no strategies selected");
    if (subsets.empty()) throw ConfigError("no subsets selected");
    if (precision != "float" && precision != "double") throw ConfigError("precision must be float or double");
    if (manifest_a.empty() != manifest_b.empty()) throw ConfigError("manifest_a and manifest_b must be given together");
    if (arch.input_edge != pipeline.grid.edge)
      throw ConfigError("model input edge " + std::to_string(arch.input_edge) + " differs from patch edge " +
                        std::to_string(pipeline.grid.edge));
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json strategies = nlohmann::json::array(), subsets = nlohmann::json::array();
  for (auto s : c.strategies) strategies.push_back(strategy_slug(s));
  for (auto s : c.subsets) subsets.push_back(data::to_string(s));
  j = {{"synth", c.synth},
       {"manifest_a", c.manifest_a},
       {"manifest_b", c.manifest_b},
       {"arch", c.arch},
       {"pipeline", c.pipeline},
       {"stage0",
        {{"classes", c.stage0.classes},
         {"images_per_class_per_view", c.stage0.images_per_class_per_view},
         {"train", c.stage0.train},
         {"import_checkpoint", c.stage0.import_checkpoint}}},
       {"hetl", c.hetl},
       {"hotl", c.hotl},
       {"scratch", c.scratch},
       {"scratch_augmentation", data::to_string(c.scratch_policy)},
       {"class_mapping", c.mapping},
       {"strategies", strategies},
       {"subsets", subsets},
       {"runs", c.runs},
       {"base_seed", c.base_seed},
       {"precision", c.precision}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  if (j.contains("synth")) c.synth = j["synth"].get<synth::SynthSpec>();
  c.manifest_a = j.value("manifest_a", c.manifest_a);
  c.manifest_b = j.value("manifest_b", c.manifest_b);
  if (j.contains("arch")) c.arch = j["arch"].get<nn::ArchitectureConfig>();
  if (j.contains("pipeline")) c.pipeline = j["pipeline"].get<data::PipelineConfig>();
  if (j.contains("stage0")) {
    const auto& s = j["stage0"];
    c.stage0.classes = s.value("classes", c.stage0.classes);
    c.stage0.images_per_class_per_view = s.value("images_per_class_per_view", c.stage0.images_per_class_per_view);
    if (s.contains("train")) c.stage0.train = train_config_from_json(s["train"], c.stage0.train);
    c.stage0.import_checkpoint = s.value("import_checkpoint", c.stage0.import_checkpoint);
  }
  if (j.contains("hetl")) c.hetl = train_config_from_json(j["hetl"], hetl_preset());
  if (j.contains("hotl")) c.hotl = train_config_from_json(j["hotl"], hotl_preset());
  if (j.contains("scratch")) c.scratch = train_config_from_json(j["scratch"], hetl_preset());
  if (j.contains("scratch_augmentation")) c.scratch_policy = data::parse_augment_policy(j["scratch_augmentation"]);
  c.mapping = j.value("class_mapping", c.mapping);
  if (j.contains("strategies")) {
    c.strategies.clear();
    for (const auto& s : j["strategies"]) c.strategies.push_back(parse_strategy(s.get<std::string>()));
  }
  if (j.contains("subsets")) {
    c.subsets.clear();
    for (const auto& s : j["subsets"]) c.subsets.push_back(data::parse_subset(s.get<std::string>()));
  }
  c.runs = j.value("runs", c.runs);
  c.base_seed = j.value("base_seed", c.base_seed);
  c.precision = j.value("precision", c.precision);
}

/// A and B image records plus the generic pretraining records.
struct ExperimentData {
  std::vector<data::ImageRecord> a;
  std::vector<data::ImageRecord> b;
  std::vector<data::ImageRecord> generic;
  std::vector<std::string> generic_keys;
};

inline ExperimentData load_experiment_data(const ExperimentConfig& c) {
  ExperimentData d;
  if (!c.manifest_a.empty()) {
    d.a = data::load_manifest(c.manifest_a);
    d.b = data::load_manifest(c.manifest_b);
  } else {
    auto s = synth::generate(c.synth);
    d.a = std::move(s.a);
    d.b = std::move(s.b);
  }
  if (c.stage0.import_checkpoint.empty()) {
    d.generic = synth::generate_generic(c.stage0.classes, c.stage0.images_per_class_per_view, c.synth.edge,
                                        derive_seed(c.base_seed, "generic"));
    d.generic_keys = synth::class_keys_for("G", c.stage0.classes);
  }
  return d;
}

/// One trained (strategy, subset, run) cell.
struct RunRecord {
  Strategy strategy = Strategy::no_tl_a;
  data::Subset subset = data::Subset::mixed;
  std::size_t run = 1;
  std::uint64_t seed = 0;
  std::optional<metrics::MetricValues> metrics;
  std::string error;
  std::size_t parameters_at_start = 0;
  bool velocities_zero_at_start = false;
  std::size_t blur_fired = 0;
  std::vector<double> epoch_accuracy;
};

struct ExperimentResult {
  nlohmann::json config;
  std::optional<nn::Checkpoint> stage0;
  double stage0_accuracy = 0;
  std::vector<RunRecord> runs;
  std::vector<metrics::TableCell> table;

  /// Mean accuracy of one strategy on one subset over successful runs.
  double mean_accuracy(Strategy s, data::Subset subset) const {
    double sum = 0;
    std::size_t n = 0;
    for (const auto& r : runs)
      if (r.strategy == s && r.subset == subset && r.metrics) {
        sum += r.metrics->accuracy;
        ++n;
      }
    return n ? sum / double(n) : 0.0;
  }
};

/// Worker count: STAGE_TRANSFER_THREADS caps `requested`.
inline std::size_t worker_count(std::size_t requested) {
  std::size_t n = std::max<std::size_t>(requested, 1);
  if (const char* env = std::getenv("STAGE_TRANSFER_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = std::min(n, static_cast<std::size_t>(cap));
  }
  return n;
}

/// Called after each finished cell; may be empty.
using ProgressFn = std::function<void(const RunRecord&)>;

namespace detail {

template <typename T>
std::vector<RunRecord> run_unit(const ExperimentConfig& c, const ExperimentData& d, const nn::Checkpoint* stage0,
                                data::Subset subset, std::size_t run, const std::optional<fs::path>& out) {
  const std::uint64_t seed = c.base_seed + run;
  const auto dir = out ? std::optional<fs::path>(*out / "runs" / data::to_string(subset) / ("run" + std::to_string(run)))
                       : std::nullopt;
  std::vector<RunRecord> records;
  std::optional<data::PreparedData> A, B;
  std::string prep_error_a, prep_error_b;
  try {
    A = data::prepare(d.a, data::dataset_a_keys(), subset, c.pipeline, seed);
  } catch (const std::exception& e) {
    prep_error_a = std::string("data A: ") + e.what();
  }
  try {
    B = data::prepare(d.b, data::dataset_b_keys(), subset, c.pipeline, seed);
  } catch (const std::exception& e) {
    prep_error_b = std::string("data B: ") + e.what();
  }
  const auto hetl_arch = stage0 ? hetl_architecture(stage0->meta.arch, c.arch.num_classes(), c.head_hidden()) : c.arch;
  std::optional<nn::Checkpoint> hetl_a;
  std::string hetl_a_error;

  auto spec_for = [&](StageKind kind, const TrainConfig& cfg, const std::string& purpose) {
    StageSpec s;
    s.kind = kind;
    s.config = cfg;
    s.scratch_policy = c.scratch_policy;
    s.mapping = c.mapping;
    s.seed = derive_seed(seed, purpose + "/" + data::to_string(subset));
    return s;
  };
  auto finish = [&](RunRecord& rec, const StageResult<T>& r) {
    rec.parameters_at_start = r.initial_parameter_count;
    rec.velocities_zero_at_start = r.velocities_zero_at_start;
    rec.blur_fired = r.outcome.trace.blur;
    for (const auto& e : r.outcome.log) rec.epoch_accuracy.push_back(e.test_accuracy);
    if (dir) {
      rec.metrics = write_stage_outputs(*dir / strategy_slug(rec.strategy), r);
    } else {
      const auto p = r.evaluation.predicted(), t = r.evaluation.truth();
      rec.metrics = metrics::compute_metrics(metrics::confusion(p, t, r.class_keys));
    }
  };

  // The A-side first step feeds the two-step strategy, so it runs whenever
  // either needs it and its outcome is shared.
  const bool want_hetl_a = std::count(c.strategies.begin(), c.strategies.end(), Strategy::hetl_a) ||
                           std::count(c.strategies.begin(), c.strategies.end(), Strategy::two_step_b);
  for (auto s : kStrategies) {
    const bool requested = std::count(c.strategies.begin(), c.strategies.end(), s) > 0;
    if (!requested && !(s == Strategy::hetl_a && want_hetl_a)) continue;
    RunRecord rec;
    rec.strategy = s;
    rec.subset = subset;
    rec.run = run;
    rec.seed = seed;
    try {
      const bool on_a = strategy_dataset(s) == "A";
      if (on_a && !A) throw DataError(prep_error_a);
      if (!on_a && !B) throw DataError(prep_error_b);
      const auto& D = on_a ? *A : *B;
      switch (s) {
        case Strategy::no_tl_a:
        case Strategy::no_tl_b:
          finish(rec, run_scratch<T>(c.arch, D, spec_for(StageKind::scratch, c.scratch, "scratch/" + D.dataset_tag)));
          break;
        case Strategy::hetl_a:
        case Strategy::hetl_b: {
          auto r = run_hetl<T>(stage0, hetl_arch, D, spec_for(StageKind::hetl, c.hetl, "hetl/" + D.dataset_tag));
          if (s == Strategy::hetl_a) hetl_a = r.checkpoint;
          if (requested) finish(rec, r);
          break;
        }
        case Strategy::two_step_b: {
          if (!hetl_a) throw StageContractError("two-step transfer has no first-step checkpoint: " + hetl_a_error);
          finish(rec, run_hotl<T>(*hetl_a, D, spec_for(StageKind::hotl, c.hotl, "hotl/B"), &hetl_arch));
          break;
        }
      }
    } catch (const std::exception& e) {
      rec.error = e.what();
      if (s == Strategy::hetl_a) hetl_a_error = e.what();
    }
    if (requested) records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace detail

/// Runs every (strategy, subset, run) cell and aggregates the table. With
/// `out`, writes the run directory tree. Cell failures are recorded and the
/// matrix continues.
template <typename T>
ExperimentResult run_experiment_matrix(const ExperimentConfig& c, const ExperimentData& d,
                                       const std::optional<fs::path>& out = std::nullopt,
                                       const ProgressFn& progress = {}) {
  c.validate();
  ExperimentResult result;
  result.config = c;
  if (out) {
    fs::create_directories(*out);
    write_text(*out / "config.json", result.config.dump(2) + "\n");
    write_text(*out / "seed.txt", std::to_string(c.base_seed) + "\n");
  }

  if (!c.stage0.import_checkpoint.empty()) {
    result.stage0 = nn::read_checkpoint_file(c.stage0.import_checkpoint);
  } else {
    const auto G = data::prepare(d.generic, d.generic_keys, data::Subset::mixed, c.pipeline,
                                 derive_seed(c.base_seed, "generic"));
    auto arch0 = c.arch;
    arch0.head = nn::make_head(c.head_hidden(), d.generic_keys.size());
    StageSpec s;
    s.config = c.stage0.train;
    s.seed = derive_seed(c.base_seed, "stage0");
    auto r = run_stage0_pretrain<T>(arch0, G, s);
    result.stage0_accuracy = r.evaluation.accuracy;
    if (out) write_stage_outputs(*out / "stage0", r);
    result.stage0 = std::move(r.checkpoint);
  }

  std::vector<std::pair<data::Subset, std::size_t>> units;
  for (auto subset : c.subsets)
    for (std::size_t run = 1; run <= c.runs; ++run) units.emplace_back(subset, run);
  std::vector<std::vector<RunRecord>> unit_records(units.size());
  std::atomic<std::size_t> next{0};
  std::mutex progress_mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < units.size();) {
      unit_records[i] = detail::run_unit<T>(c, d, &*result.stage0, units[i].first, units[i].second, out);
      if (progress) {
        std::lock_guard lock(progress_mutex);
        for (const auto& r : unit_records[i]) progress(r);
      }
    }
  };
  const std::size_t workers = std::min(worker_count(c.threads), units.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& u : unit_records)
    for (auto& r : u) result.runs.push_back(std::move(r));

  for (auto subset : c.subsets)
    for (auto s : c.strategies) {
      metrics::TableCell cell{data::to_string(subset), strategy_label(s), strategy_dataset(s), std::nullopt, ""};
      std::vector<metrics::MetricValues> ok;
      std::vector<std::string> failures;
      for (const auto& r : result.runs)
        if (r.strategy == s && r.subset == subset) {
          if (r.metrics)
            ok.push_back(*r.metrics);
          else
            failures.push_back("run " + std::to_string(r.run) + " failed: " + r.error);
        }
      if (ok.empty()) {
        cell.error = failures.empty() ? "no runs" : failures.front();
      } else {
        cell.report = metrics::aggregate(ok, cell.strategy, cell.subset, cell.dataset);
        cell.report->flags.insert(cell.report->flags.end(), failures.begin(), failures.end());
      }
      result.table.push_back(std::move(cell));
    }

  if (out) {
    write_text(*out / "report" / "table.csv", metrics::table_csv(result.table));
    write_text(*out / "report" / "table.txt", metrics::table_text(result.table));
    write_text(*out / "report" / "table.json", metrics::table_json(result.table).dump(2) + "\n");
  }
  return result;
}

inline ExperimentResult run_experiment_matrix(const ExperimentConfig& c, const ExperimentData& d,
                                              const std::optional<fs::path>& out = std::nullopt,
                                              const ProgressFn& progress = {}) {
  return c.precision == "double" ? run_experiment_matrix<double>(c, d, out, progress)
                                 : run_experiment_matrix<float>(c, d, out, progress);
}

}  // namespace kstl::transfer
