#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "kstl/core/errors.hpp"
#include "kstl/core/rng.hpp"
#include "kstl/data/patches.hpp"
#include "kstl/data/records.hpp"

namespace kstl::data {

enum class SplitSide { train, test };

/// Fragment-level train/test partition. Patches inherit the side of their
/// fragment, so no fragment can appear on both sides.
struct SplitManifest {
  std::uint64_t seed = 0;
  double ratio = 0.8;
  std::map<std::string, SplitSide> fragments;
  std::vector<std::string> train;  // patch ids, filled by attach()
  std::vector<std::string> test;
  std::vector<std::string> warnings;

  SplitSide side_of(const std::string& fragment_id) const {
    auto it = fragments.find(fragment_id);
    if (it == fragments.end()) throw DataError("fragment '" + fragment_id + "' is not in the split manifest");
    return it->second;
  }

  /// Records the patch ids of `patches` on their fragment's side.
  void attach(const std::vector<Patch>& patches) {
    train.clear();
    test.clear();
    for (const auto& p : patches) (side_of(p.fragment_id) == SplitSide::train ? train : test).push_back(p.patch_id);
  }

  double train_fraction() const {
    const std::size_t n = train.size() + test.size();
    return n == 0 ? 0.0 : static_cast<double>(train.size()) / static_cast<double>(n);
  }
};

/// Shuffles fragments per class with the seeded generator and assigns each
/// to train when that does not move the running train weight (in images)
/// further from ratio * cumulative weight; the target carries across classes
/// so the overall fraction stays close to the ratio. Afterwards, for each
/// view a class has in two or more fragments, the smallest fragment is moved
/// across if one side would otherwise lack that view entirely.
inline SplitManifest split(const std::vector<ImageRecord>& records, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1), got " + std::to_string(ratio));
  SplitManifest m;
  m.seed = seed;
  m.ratio = ratio;
  struct Frag {
    std::size_t weight = 0;
    std::array<std::size_t, 2> views{};  // surface, section
  };
  // class -> fragment -> counts, in sorted order for input-order independence.
  std::map<std::string, std::map<std::string, Frag>> by_class;
  for (const auto& r : records) {
    if (r.fragment_id.empty()) throw DataError("record " + r.image_id + " has no fragment_id");
    auto& f = by_class[r.class_key][r.fragment_id];
    ++f.weight;
    ++f.views[r.view == View::surface ? 0 : 1];
  }
  Rng rng(seed);
  double cumulative = 0, train_weight = 0;
  for (auto& [cls, frags] : by_class) {
    if (frags.size() == 1)
      m.warnings.push_back("class " + cls + " has a single fragment and cannot appear in both splits");
    std::vector<std::pair<std::string, Frag>> order(frags.begin(), frags.end());
    rng.shuffle(order);
    for (const auto& [fragment, f] : order) cumulative += static_cast<double>(f.weight);
    const double target = ratio * cumulative;
    for (const auto& [fragment, f] : order) {
      const double with = std::abs(train_weight + static_cast<double>(f.weight) - target);
      const double without = std::abs(train_weight - target);
      const bool to_train = with <= without;
      if (to_train) train_weight += static_cast<double>(f.weight);
      m.fragments[fragment] = to_train ? SplitSide::train : SplitSide::test;
    }
    for (std::size_t v = 0; v < 2; ++v) {
      std::array<std::size_t, 2> holders{};  // fragments with view v on train, test
      for (const auto& [fragment, f] : order)
        if (f.views[v]) ++holders[m.fragments[fragment] == SplitSide::train ? 0 : 1];
      if (holders[0] + holders[1] < 2 || (holders[0] && holders[1])) continue;
      const SplitSide full = holders[0] ? SplitSide::train : SplitSide::test;
      const std::pair<std::string, Frag>* pick = nullptr;
      for (const auto& e : order)
        if (e.second.views[v] && m.fragments[e.first] == full && (!pick || e.second.weight < pick->second.weight))
          pick = &e;
      m.fragments[pick->first] = full == SplitSide::train ? SplitSide::test : SplitSide::train;
      const double w = static_cast<double>(pick->second.weight);
      train_weight += full == SplitSide::train ? -w : w;
    }
  }
  return m;
}

inline void to_json(nlohmann::json& j, const SplitManifest& m) {
  nlohmann::json frags = nlohmann::json::object();
  for (const auto& [f, s] : m.fragments) frags[f] = s == SplitSide::train ? "train" : "test";
  j = {{"seed", m.seed}, {"ratio", m.ratio}, {"fragments", frags},
       {"train", m.train}, {"test", m.test},  {"warnings", m.warnings}};
}

inline void from_json(const nlohmann::json& j, SplitManifest& m) {
  m.seed = j.at("seed").get<std::uint64_t>();
  m.ratio = j.at("ratio").get<double>();
  m.fragments.clear();
  for (const auto& [f, s] : j.at("fragments").items())
    m.fragments[f] = s.get<std::string>() == "train" ? SplitSide::train : SplitSide::test;
  m.train = j.at("train").get<std::vector<std::string>>();
  m.test = j.at("test").get<std::vector<std::string>>();
  m.warnings = j.value("warnings", std::vector<std::string>{});
}

/// Violations of split disjointness, checkable from the manifest and the
/// patch list alone: a patch id on both sides, or a fragment whose patches
/// land on both sides.
inline std::vector<std::string> split_violations(const SplitManifest& m, const std::vector<Patch>& patches) {
  std::vector<std::string> out;
  std::set<std::string> train(m.train.begin(), m.train.end());
  for (const auto& id : m.test)
    if (train.contains(id)) out.push_back("patch " + id + " is in both splits");
  std::set<std::string> test(m.test.begin(), m.test.end());
  std::map<std::string, std::set<int>> sides;
  for (const auto& p : patches) {
    if (train.contains(p.patch_id)) sides[p.fragment_id].insert(0);
    if (test.contains(p.patch_id)) sides[p.fragment_id].insert(1);
  }
  for (const auto& [f, s] : sides)
    if (s.size() > 1) out.push_back("fragment " + f + " spans both splits");
  return out;
}

}  // namespace kstl::data
