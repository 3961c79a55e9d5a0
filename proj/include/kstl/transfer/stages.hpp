#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kstl/nn/checkpoint.hpp"
#include "kstl/transfer/trainer.hpp"

namespace kstl::transfer {

struct StageSpec {
  StageKind kind = StageKind::scratch;
  TrainConfig config = hetl_preset();
  data::AugmentPolicy scratch_policy = data::AugmentPolicy::geometric;
  data::BlurConfig blur;
  ClassMapping mapping;  // HoTL only; empty means positional
  std::uint64_t seed = 0;
  std::vector<std::string>* access_log = nullptr;
};

template <typename T>
struct StageResult {
  nn::Model<T> model;
  nn::Checkpoint checkpoint;
  TrainOutcome outcome;
  Evaluation evaluation;
  std::vector<std::string> class_keys;  // output order
  std::size_t initial_parameter_count = 0;
  bool velocities_zero_at_start = false;
};

namespace detail {

template <typename T>
bool all_velocities_zero(const nn::Model<T>& m) {
  for (const auto& e : m.params().velocities())
    for (T v : e.value.values())
      if (v != T(0)) return false;
  return true;
}

template <typename T>
StageResult<T> train_stage(nn::Model<T> model, const data::PreparedData& d, std::vector<std::string> keys,
                           const StageSpec& spec, nlohmann::json extra) {
  if (model.arch().num_classes() != keys.size())
    throw ConfigError("model has " + std::to_string(model.arch().num_classes()) + " outputs but dataset " +
                      d.dataset_tag + " declares " + std::to_string(keys.size()) + " classes");
  const auto train_set = make_set<T>(d.train, d.stats, keys);
  const auto test_set = make_set<T>(d.test, d.stats, keys);
  AccessGuard guard = AccessGuard::from_split(d.split);
  guard.log = spec.access_log;
  TrainOptions opt{spec.config, stage_policy(spec.kind, spec.scratch_policy), spec.blur,
                   derive_seed(spec.seed, "stage/" + to_string(spec.kind)), &guard};
  const std::size_t initial = model.parameter_count();
  const bool zero = all_velocities_zero(model);
  auto outcome = train(model, train_set, &test_set, opt);
  auto evaluation = evaluate(model, test_set);
  extra["dataset"] = d.dataset_tag;
  extra["subset"] = data::to_string(d.subset);
  extra["augmentation"] = data::to_string(opt.policy);
  extra["train_config"] = spec.config;
  auto ckpt = nn::make_checkpoint(model, to_string(spec.kind), spec.seed, keys, extra);
  return {std::move(model), std::move(ckpt), std::move(outcome), std::move(evaluation), std::move(keys), initial, zero};
}

}  // namespace detail

/// Training from the seeded random initialization.
template <typename T>
StageResult<T> run_scratch(const nn::ArchitectureConfig& arch, const data::PreparedData& d, StageSpec spec) {
  spec.kind = StageKind::scratch;
  nn::Model<T> model(arch, derive_seed(spec.seed, "init/scratch"));
  return detail::train_stage(std::move(model), d, d.class_keys, spec, {});
}

/// Generic pretraining that stands in for large-scale natural-image weights.
template <typename T>
StageResult<T> run_stage0_pretrain(const nn::ArchitectureConfig& arch, const data::PreparedData& d, StageSpec spec) {
  spec.kind = StageKind::stage0;
  nn::Model<T> model(arch, derive_seed(spec.seed, "init/stage0"));
  return detail::train_stage(std::move(model), d, d.class_keys, spec, {});
}

/// Architecture of the first transfer step: the source backbone plus a fresh
/// head (the 768/256/128 preset when the backbone emits 768 features).
inline nn::ArchitectureConfig hetl_architecture(const nn::ArchitectureConfig& backbone_source, std::size_t classes,
                                                const std::vector<std::size_t>& hidden) {
  nn::ArchitectureConfig a = backbone_source;
  a.head = a.feature_width() == 768 ? nn::full_scale_head(classes) : nn::make_head(hidden, classes);
  return a;
}

/// First transfer step: backbone from `stage0` (when given), new head, then
/// training with geometric+blur augmentation.
template <typename T>
StageResult<T> run_hetl(const nn::Checkpoint* stage0, const nn::ArchitectureConfig& arch, const data::PreparedData& d,
                        StageSpec spec) {
  spec.kind = StageKind::hetl;
  nn::Model<T> model(arch, derive_seed(spec.seed, "init/hetl"));
  nlohmann::json extra = nlohmann::json::object();
  if (stage0) {
    const auto want = nn::backbone_hash(arch);
    if (stage0->meta.backbone_hash != want)
      throw ConfigError("head/backbone mismatch: stage0 backbone " + stage0->meta.backbone_hash + " (" +
                        std::to_string(stage0->meta.arch.feature_width()) + " features) cannot feed requested backbone " +
                        want + " (" + std::to_string(arch.feature_width()) + " features)");
    nn::restore_backbone(model, *stage0);
    extra["source_stage"] = stage0->meta.stage;
    extra["source_arch_hash"] = stage0->meta.arch_hash;
  }
  return detail::train_stage(std::move(model), d, d.class_keys, spec, extra);
}

/// Second transfer step: every parameter from `source`, no layer added or
/// removed, output units relabeled through the class mapping, fresh optimizer
/// state, geometric-only augmentation. `requested`, when given, must be the
/// source architecture unchanged.
template <typename T>
StageResult<T> run_hotl(const nn::Checkpoint& source, const data::PreparedData& d, StageSpec spec,
                        const nn::ArchitectureConfig* requested = nullptr) {
  spec.kind = StageKind::hotl;
  if (source.meta.stage != "hetl" && source.meta.stage != "scratch")
    throw StageContractError("HoTL hand-off must come from a hetl or scratch checkpoint, got stage '" +
                             source.meta.stage + "'");
  if (requested && nn::arch_hash(*requested) != source.meta.arch_hash) {
    const std::size_t want = nn::Model<T>(*requested, 0).parameter_count();
    throw StageContractError("HoTL must reuse the hand-off architecture unchanged (no layers added or removed): "
                             "requested arch " + nn::arch_hash(*requested) + " with " + std::to_string(want) +
                             " parameters, hand-off arch " + source.meta.arch_hash + " with " +
                             std::to_string(source.parameter_count()));
  }
  nn::Model<T> model(source.meta.arch, derive_seed(spec.seed, "init/hotl"));
  nn::restore(model, source, /*with_velocity=*/false);
  if (model.parameter_count() != source.parameter_count())
    throw StageContractError("HoTL model has " + std::to_string(model.parameter_count()) +
                             " parameters, hand-off has " + std::to_string(source.parameter_count()));
  const auto mapping = spec.mapping.empty() ? positional_mapping(source.meta.class_keys, d.class_keys) : spec.mapping;
  auto keys = remap_keys(source.meta.class_keys, d.class_keys, mapping);
  nlohmann::json extra = {{"source_stage", source.meta.stage},
                          {"source_arch_hash", source.meta.arch_hash},
                          {"source_class_keys", source.meta.class_keys}};
  auto r = detail::train_stage(std::move(model), d, std::move(keys), spec, extra);
  if (r.model.parameter_count() != r.initial_parameter_count)
    throw StageContractError("parameter count changed during HoTL");
  return r;
}

}  // namespace kstl::transfer
