#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "kstl/metrics/metrics.hpp"
#include "kstl/metrics/votes.hpp"
#include "kstl/transfer/stages.hpp"

namespace kstl::transfer {

namespace fs = std::filesystem;

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::string epoch_csv(const std::vector<EpochRecord>& log) {
  std::string s = "epoch,train_loss,test_accuracy\n";
  for (const auto& r : log) s += std::to_string(r.epoch) + "," + fmt_double(r.train_loss) + "," + fmt_double(r.test_accuracy) + "\n";
  return s;
}

inline std::string predictions_csv(const Evaluation& e, const std::vector<std::string>& keys) {
  std::string s = "patch_id,true,predicted";
  for (const auto& k : keys) s += ",score_" + k;
  s += "\n";
  for (const auto& p : e.predictions) {
    s += p.patch_id + "," + keys[p.truth] + "," + keys[p.predicted];
    for (double v : p.scores) s += "," + fmt_double(v);
    s += "\n";
  }
  return s;
}

inline nlohmann::json trace_json(const data::AugmentTrace& t) {
  nlohmann::json g;
  for (std::size_t i = 0; i < t.geometric.size(); ++i) g[data::to_string(data::kGeometricOps[i])] = t.geometric[i];
  return {{"samples", t.samples}, {"geometric", g}, {"blur", t.blur}};
}

/// Image-level majority vote of an evaluation over `patches` (the evaluated
/// set, in order), as JSON with its own metrics.
inline nlohmann::json image_vote_report(const Evaluation& e, const std::vector<data::Patch>& patches,
                                        const std::vector<std::string>& keys) {
  if (e.predictions.size() != patches.size())
    throw DataError("image vote: " + std::to_string(e.predictions.size()) + " predictions for " +
                    std::to_string(patches.size()) + " patches");
  std::vector<metrics::PatchVote> votes;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto& p = patches[i];
    const auto& q = e.predictions[i];
    votes.push_back({p.image_id, p.origin_patch_id.empty() ? p.patch_id : p.origin_patch_id, q.truth, q.predicted,
                     q.scores});
  }
  const auto images = metrics::vote_by_image(votes, keys.size());
  std::vector<int> pred, truth;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& v : images) {
    pred.push_back(v.predicted);
    truth.push_back(v.truth);
    rows.push_back({{"image_id", v.image_id}, {"true", keys[v.truth]}, {"predicted", keys[v.predicted]},
                    {"patches", v.patches}});
  }
  const auto cm = metrics::confusion(pred, truth, keys);
  return {{"extension", "image-level majority vote over distinct patches; headline metrics are per patch"},
          {"metrics", metrics::compute_metrics(cm)},
          {"confusion", cm},
          {"images", rows}};
}

/// checkpoint.kstl, epochs.csv, predictions.csv, metrics.json and
/// augmentation.json for one trained stage.
template <typename T>
metrics::MetricValues write_stage_outputs(const fs::path& dir, const StageResult<T>& r) {
  fs::create_directories(dir);
  nn::write_checkpoint_file(dir / "checkpoint.kstl", r.checkpoint);
  write_text(dir / "epochs.csv", epoch_csv(r.outcome.log));
  write_text(dir / "predictions.csv", predictions_csv(r.evaluation, r.class_keys));
  const auto pred = r.evaluation.predicted();
  const auto truth = r.evaluation.truth();
  const auto cm = metrics::confusion(pred, truth, r.class_keys);
  const auto m = metrics::compute_metrics(cm);
  nlohmann::json j = {{"metrics", m}, {"confusion", cm}};
  write_text(dir / "metrics.json", j.dump(2) + "\n");
  write_text(dir / "augmentation.json", trace_json(r.outcome.trace).dump(2) + "\n");
  return m;
}

/// Wall-clock information lives in its own file so the rest of a run
/// directory is reproducible byte for byte.
inline void write_metadata_sidecar(const fs::path& dir, const std::string& command,
                                   std::chrono::system_clock::time_point started) {
  auto iso = [](std::chrono::system_clock::time_point t) {
    const std::time_t tt = std::chrono::system_clock::to_time_t(t);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
    return std::string(buf);
  };
  const auto now = std::chrono::system_clock::now();
  nlohmann::json j = {{"command", command},
                      {"started", iso(started)},
                      {"finished", iso(now)},
                      {"elapsed_seconds", std::chrono::duration<double>(now - started).count()}};
  write_text(dir / "metadata.json", j.dump(2) + "\n");
}

}  // namespace kstl::transfer
