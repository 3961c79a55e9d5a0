#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "kstl/core/errors.hpp"
#include "kstl/data/augment.hpp"

namespace kstl::transfer {

enum class StageKind { scratch, stage0, hetl, hotl };

inline std::string to_string(StageKind k) {
  switch (k) {
    case StageKind::scratch: return "scratch";
    case StageKind::stage0: return "stage0";
    case StageKind::hetl: return "hetl";
    default: return "hotl";
  }
}

inline StageKind parse_stage(const std::string& s) {
  if (s == "scratch") return StageKind::scratch;
  if (s == "stage0") return StageKind::stage0;
  if (s == "hetl") return StageKind::hetl;
  if (s == "hotl") return StageKind::hotl;
  throw ConfigError("unknown stage '" + s + "' (expected scratch|stage0|hetl|hotl)");
}

struct TrainConfig {
  std::size_t batch_size = 24;
  double learning_rate = 0.001;
  double momentum = 0.9;
  std::size_t epochs = 30;
  double dropout = 0.5;
  std::string precision = "float";  // float | double

  void validate() const {
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (batch norm needs two samples)");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must lie in [0, 1)");
    if (precision != "float" && precision != "double") throw ConfigError("precision must be float or double");
  }
  bool operator==(const TrainConfig&) const = default;
};

inline TrainConfig hetl_preset() { return {24, 0.001, 0.9, 30, 0.5, "float"}; }
inline TrainConfig hotl_preset() { return {24, 0.01, 0.9, 30, 0.5, "float"}; }

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size}, {"learning_rate", c.learning_rate}, {"momentum", c.momentum},
       {"epochs", c.epochs},         {"dropout", c.dropout},             {"precision", c.precision}};
}

/// Missing keys fall back to `defaults`, so a config may override only the
/// fields it cares about.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults) {
  TrainConfig c = defaults;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.epochs = j.value("epochs", c.epochs);
  c.dropout = j.value("dropout", c.dropout);
  c.precision = j.value("precision", c.precision);
  c.validate();
  return c;
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) { c = train_config_from_json(j, hetl_preset()); }

/// Augmentation is fixed per stage except for scratch training.
inline data::AugmentPolicy stage_policy(StageKind k, data::AugmentPolicy scratch_policy) {
  switch (k) {
    case StageKind::hetl: return data::AugmentPolicy::geometric_blur;
    case StageKind::hotl: return data::AugmentPolicy::geometric;
    case StageKind::stage0: return data::AugmentPolicy::geometric;
    default: return scratch_policy;
  }
}

/// Target key -> source key. Output unit i of a model trained on the source
/// keys is relabeled as the target key mapped to source key i.
using ClassMapping = std::map<std::string, std::string>;

inline ClassMapping positional_mapping(const std::vector<std::string>& source, const std::vector<std::string>& target) {
  if (source.size() != target.size())
    throw ConfigError("positional class mapping needs equal key counts, got " + std::to_string(source.size()) +
                      " and " + std::to_string(target.size()));
  ClassMapping m;
  for (std::size_t i = 0; i < source.size(); ++i) m[target[i]] = source[i];
  return m;
}

/// Target keys reordered so that position i is the key served by output unit i.
inline std::vector<std::string> remap_keys(const std::vector<std::string>& source, const std::vector<std::string>& target,
                                           const ClassMapping& mapping) {
  if (source.size() != target.size())
    throw ConfigError("class mapping: source has " + std::to_string(source.size()) + " keys, target " +
                      std::to_string(target.size()));
  std::vector<std::string> out(source.size());
  for (const auto& t : target) {
    auto it = mapping.find(t);
    if (it == mapping.end()) throw ConfigError("class mapping has no entry for target key " + t);
    const auto pos = std::find(source.begin(), source.end(), it->second);
    if (pos == source.end()) throw ConfigError("class mapping sends " + t + " to unknown source key " + it->second);
    auto& slot = out[pos - source.begin()];
    if (!slot.empty()) throw ConfigError("class mapping sends both " + slot + " and " + t + " to " + it->second);
    slot = t;
  }
  return out;
}

}  // namespace kstl::transfer
