#pragma once

#include <map>
#include <string>
#include <vector>

#include "kstl/core/errors.hpp"

namespace kstl::metrics {

/// One patch-level prediction tagged with its source image. `source_id`
/// identifies the original patch, so upsampled copies vote once.
struct PatchVote {
  std::string image_id;
  std::string source_id;
  int truth = 0;
  int predicted = 0;
  std::vector<double> scores;
};

struct ImageVote {
  std::string image_id;
  int truth = 0;
  int predicted = 0;
  std::size_t patches = 0;
};

/// Image-level majority vote over distinct patches (an extension; the
/// headline metrics stay per patch). Ties go to the larger summed score,
/// then the lower class index.
inline std::vector<ImageVote> vote_by_image(const std::vector<PatchVote>& votes, std::size_t classes) {
  struct Tally {
    int truth = 0;
    std::vector<std::size_t> count;
    std::vector<double> score;
    std::map<std::string, bool> seen;
  };
  std::map<std::string, Tally> by_image;
  for (const auto& v : votes) {
    if (v.predicted < 0 || std::size_t(v.predicted) >= classes)
      throw DataError("vote for class " + std::to_string(v.predicted) + " outside [0, " + std::to_string(classes) + ")");
    auto& t = by_image[v.image_id];
    if (t.count.empty()) {
      t.truth = v.truth;
      t.count.assign(classes, 0);
      t.score.assign(classes, 0.0);
    } else if (t.truth != v.truth) {
      throw DataError("image " + v.image_id + " has patches with different true classes");
    }
    if (t.seen[v.source_id]) continue;
    t.seen[v.source_id] = true;
    ++t.count[v.predicted];
    for (std::size_t k = 0; k < classes && k < v.scores.size(); ++k) t.score[k] += v.scores[k];
  }
  std::vector<ImageVote> out;
  for (const auto& [id, t] : by_image) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < classes; ++k)
      if (t.count[k] > t.count[best] || (t.count[k] == t.count[best] && t.score[k] > t.score[best])) best = k;
    out.push_back({id, t.truth, int(best), t.seen.size()});
  }
  return out;
}

}  // namespace kstl::metrics
