#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "kstl/core/errors.hpp"

namespace kstl::metrics {

/// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::vector<std::string> class_keys;
  std::vector<std::vector<std::size_t>> counts;

  std::size_t classes() const { return class_keys.size(); }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& row : counts)
      for (auto v : row) n += v;
    return n;
  }
  std::size_t at(std::size_t truth, std::size_t predicted) const { return counts.at(truth).at(predicted); }
  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> truth,
                                 const std::vector<std::string>& class_keys) {
  if (predicted.size() != truth.size())
    throw DataError("confusion: " + std::to_string(predicted.size()) + " predictions for " +
                    std::to_string(truth.size()) + " labels");
  const std::size_t c = class_keys.size();
  ConfusionMatrix m{class_keys, std::vector<std::vector<std::size_t>>(c, std::vector<std::size_t>(c, 0))};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || std::size_t(truth[i]) >= c || predicted[i] < 0 || std::size_t(predicted[i]) >= c)
      throw DataError("confusion: sample " + std::to_string(i) + " has an index outside [0, " + std::to_string(c) + ")");
    ++m.counts[truth[i]][predicted[i]];
  }
  return m;
}

struct ClassMetrics {
  std::string class_key;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

struct MetricValues {
  double accuracy = 0;
  double precision = 0;  // macro
  double recall = 0;     // macro
  double f1 = 0;         // macro
  std::vector<ClassMetrics> per_class;
  std::vector<std::string> flags;

  std::array<double, 4> as_array() const { return {accuracy, precision, recall, f1}; }
};

inline const std::array<const char*, 4> kMetricNames{"accuracy", "precision", "recall", "f1"};

/// Accuracy is trace/total. Precision, recall and F1 are unweighted means of
/// the per-class values; undefined ratios count as 0 and raise a flag.
inline MetricValues compute_metrics(const ConfusionMatrix& cm) {
  const std::size_t total = cm.total();
  if (cm.classes() == 0 || total == 0) throw DataError("metrics of an empty confusion matrix");
  MetricValues m;
  std::size_t trace = 0;
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    std::size_t tp = cm.at(k, k), row = 0, col = 0;
    for (std::size_t j = 0; j < cm.classes(); ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    trace += tp;
    ClassMetrics c{cm.class_keys[k]};
    const std::string& key = cm.class_keys[k];
    if (row == 0 && col == 0) {
      m.flags.push_back("class " + key + " absent from truth and predictions");
    } else {
      if (col == 0)
        m.flags.push_back("precision of class " + key + " undefined (never predicted), counted as 0");
      else
        c.precision = double(tp) / double(col);
      if (row == 0)
        m.flags.push_back("recall of class " + key + " undefined (no true samples), counted as 0");
      else
        c.recall = double(tp) / double(row);
      if (c.precision + c.recall > 0) c.f1 = 2 * c.precision * c.recall / (c.precision + c.recall);
    }
    m.precision += c.precision;
    m.recall += c.recall;
    m.f1 += c.f1;
    m.per_class.push_back(c);
  }
  const double n = double(cm.classes());
  m.precision /= n;
  m.recall /= n;
  m.f1 /= n;
  m.accuracy = double(trace) / double(total);
  return m;
}

inline void to_json(nlohmann::json& j, const MetricValues& m) {
  j = {{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"flags", m.flags}};
  auto& pc = j["per_class"] = nlohmann::json::array();
  for (const auto& c : m.per_class)
    pc.push_back({{"class_key", c.class_key}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}});
}

inline void from_json(const nlohmann::json& j, MetricValues& m) {
  m.accuracy = j.at("accuracy").get<double>();
  m.precision = j.at("precision").get<double>();
  m.recall = j.at("recall").get<double>();
  m.f1 = j.at("f1").get<double>();
  m.flags = j.value("flags", std::vector<std::string>{});
  m.per_class.clear();
  for (const auto& c : j.value("per_class", nlohmann::json::array()))
    m.per_class.push_back({c.at("class_key").get<std::string>(), c.at("precision").get<double>(),
                           c.at("recall").get<double>(), c.at("f1").get<double>()});
}

inline void to_json(nlohmann::json& j, const ConfusionMatrix& m) {
  j = {{"class_keys", m.class_keys}, {"counts", m.counts}};
}

/// "0.832±0.012"
inline std::string format_pm(double mean, double stddev) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f±%.3f", mean, stddev);
  return buf;
}

struct Aggregate {
  double mean = 0;
  double stddev = 0;  // sample standard deviation, n-1 denominator
};

inline Aggregate mean_std(std::span<const double> xs) {
  if (xs.empty()) throw DataError("aggregate of zero runs");
  Aggregate a;
  for (double x : xs) a.mean += x;
  a.mean /= double(xs.size());
  if (xs.size() > 1) {
    double ss = 0;
    for (double x : xs) ss += (x - a.mean) * (x - a.mean);
    a.stddev = std::sqrt(ss / double(xs.size() - 1));
  }
  return a;
}

struct MetricsReport {
  std::string strategy;
  std::string subset;
  std::string dataset;
  std::vector<MetricValues> runs;
  std::array<Aggregate, 4> summary{};
  std::vector<std::string> flags;

  std::size_t n_runs() const { return runs.size(); }
  std::string formatted(std::size_t metric) const { return format_pm(summary[metric].mean, summary[metric].stddev); }
};

inline MetricsReport aggregate(std::vector<MetricValues> runs, std::string strategy = "", std::string subset = "",
                               std::string dataset = "") {
  if (runs.empty()) throw DataError("aggregate needs at least one run");
  MetricsReport r;
  r.strategy = std::move(strategy);
  r.subset = std::move(subset);
  r.dataset = std::move(dataset);
  r.runs = std::move(runs);
  for (std::size_t k = 0; k < 4; ++k) {
    std::vector<double> xs;
    for (const auto& m : r.runs) xs.push_back(m.as_array()[k]);
    r.summary[k] = mean_std(xs);
  }
  if (r.runs.size() == 1) r.flags.push_back("single run: standard deviation reported as 0");
  for (std::size_t i = 0; i < r.runs.size(); ++i)
    for (const auto& f : r.runs[i].flags) r.flags.push_back("run " + std::to_string(i + 1) + ": " + f);
  return r;
}

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = {{"strategy", r.strategy}, {"subset", r.subset}, {"dataset", r.dataset}, {"n_runs", r.n_runs()},
       {"runs", r.runs},         {"flags", r.flags}};
  for (std::size_t k = 0; k < 4; ++k)
    j["summary"][kMetricNames[k]] = {{"mean", r.summary[k].mean}, {"std", r.summary[k].stddev}};
}

}  // namespace kstl::metrics
