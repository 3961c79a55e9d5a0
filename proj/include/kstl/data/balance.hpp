#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "kstl/core/errors.hpp"
#include "kstl/core/rng.hpp"
#include "kstl/data/augment.hpp"
#include "kstl/data/patches.hpp"

namespace kstl::data {

/// Brings every class in `class_keys` to exactly `target` patches: classes
/// above target are subsampled uniformly (input order kept), classes below
/// are topped up with geometric transforms of randomly chosen originals.
/// Output is grouped by class in `class_keys` order.
inline std::vector<Patch> balance(const std::vector<Patch>& patches, std::size_t target,
                                  const std::vector<std::string>& class_keys, Rng& rng) {
  if (target < 1) throw ConfigError("balance target must be at least 1");
  std::vector<Patch> out;
  out.reserve(target * class_keys.size());
  for (const auto& key : class_keys) {
    std::vector<const Patch*> members;
    for (const auto& p : patches)
      if (p.class_key == key) members.push_back(&p);
    if (members.empty()) throw DataError("class " + key + " has no patches to balance");
    if (members.size() >= target) {
      std::vector<std::size_t> idx(members.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      if (members.size() > target) {
        rng.shuffle(idx);
        idx.resize(target);
        std::sort(idx.begin(), idx.end());
      }
      for (std::size_t i : idx) out.push_back(*members[i]);
      continue;
    }
    for (const Patch* p : members) out.push_back(*p);
    for (std::size_t k = 0; k < target - members.size(); ++k) {
      const Patch& src = *members[rng.index(members.size())];
      // Skip the identity so every copy is a genuine transform.
      const GeometricOp op = kGeometricOps[1 + rng.index(kGeometricOps.size() - 1)];
      Patch copy = src;
      copy.pixels = apply_geometric(src.pixels, op);
      copy.patch_id = src.patch_id + "~aug" + std::to_string(k) + "-" + to_string(op);
      copy.origin_patch_id = src.origin_patch_id.empty() ? src.patch_id : src.origin_patch_id;
      out.push_back(std::move(copy));
    }
  }
  return out;
}

}  // namespace kstl::data
