#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "kstl/core/rng.hpp"
#include "kstl/data/balance.hpp"
#include "kstl/data/patches.hpp"
#include "kstl/data/records.hpp"
#include "kstl/data/split.hpp"
#include "kstl/data/whitening.hpp"

namespace kstl::data {

struct PipelineConfig {
  PatchGrid grid{16, 4};
  double split_ratio = 0.8;
  std::size_t per_class_target = 120;  // train + test patches per class

  std::size_t train_target() const {
    return static_cast<std::size_t>(std::lround(split_ratio * static_cast<double>(per_class_target)));
  }
  std::size_t test_target() const { return per_class_target - train_target(); }
};

/// 256px patches, at most 20px overlap, 80/20 split, 2,000 patches per class
/// (12,000 per six-class dataset).
inline PipelineConfig full_scale_pipeline() { return {{256, 20}, 0.8, 2000}; }

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"patch_edge", c.grid.edge}, {"max_overlap", c.grid.max_overlap}, {"split_ratio", c.split_ratio},
       {"per_class_target", c.per_class_target}};
}
inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
  c.grid.edge = j.value("patch_edge", std::size_t{16});
  c.grid.max_overlap = j.value("max_overlap", std::size_t{4});
  c.split_ratio = j.value("split_ratio", 0.8);
  c.per_class_target = j.value("per_class_target", std::size_t{120});
}

/// One dataset, one patch subset, ready for training: balanced train/test
/// patches, the fragment split, and whitening statistics from the training
/// side only.
struct PreparedData {
  std::string dataset_tag;
  Subset subset = Subset::mixed;
  std::vector<std::string> class_keys;
  std::vector<Patch> train;
  std::vector<Patch> test;
  SplitManifest split;
  WhiteningStats stats;
  std::vector<std::string> warnings;
};

/// Split by fragment over all records of the dataset (so every subset shares
/// one assignment), then extract the subset's patches, balance each side to
/// its share of the per-class target, and whiten on the training side.
inline PreparedData prepare(const std::vector<ImageRecord>& records, const std::vector<std::string>& class_keys,
                            Subset subset, const PipelineConfig& cfg, std::uint64_t seed) {
  if (records.empty()) throw DataError("cannot prepare an empty dataset");
  PreparedData d;
  d.dataset_tag = records.front().dataset_tag;
  d.subset = subset;
  d.class_keys = class_keys;
  d.split = split(records, cfg.split_ratio, derive_seed(seed, "split/" + d.dataset_tag));
  d.warnings = d.split.warnings;

  std::vector<ImageRecord> chosen;
  for (const auto& r : records) {
    if (r.dataset_tag != d.dataset_tag) throw DataError("prepare() expects a single dataset per call");
    if (in_subset(r.view, subset)) chosen.push_back(r);
  }
  auto patches = extract_all(chosen, cfg.grid, &d.warnings);
  std::vector<Patch> train, test;
  for (auto& p : patches) (d.split.side_of(p.fragment_id) == SplitSide::train ? train : test).push_back(std::move(p));

  const std::string scope = d.dataset_tag + "/" + to_string(subset);
  Rng brng(derive_seed(seed, "balance/" + scope));
  d.train = balance(train, cfg.train_target(), class_keys, brng);
  d.test = balance(test, cfg.test_target(), class_keys, brng);
  d.stats = compute_whitening_stats(d.train, scope + "/train");

  std::vector<Patch> all(d.train);
  all.insert(all.end(), d.test.begin(), d.test.end());
  d.split.attach(all);
  return d;
}

}  // namespace kstl::data
