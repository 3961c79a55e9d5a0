#pragma once

#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "kstl/metrics/metrics.hpp"

namespace kstl::metrics {

/// One row of the strategy table. `error` is set when every run of the cell
/// failed; partial failures are listed in report flags.
struct TableCell {
  std::string subset;
  std::string strategy;
  std::string dataset;
  std::optional<MetricsReport> report;
  std::string error;
};

inline const char* kTableConventions =
    "accuracy = trace/total over patches; precision, recall, f1 = unweighted macro mean over classes; "
    "values are mean±sample std (n-1) over runs";

inline std::string cell_value(const TableCell& c, std::size_t metric) {
  return c.report ? c.report->formatted(metric) : "failed";
}

inline std::string table_csv(const std::vector<TableCell>& cells) {
  std::ostringstream os;
  os << "subset,strategy,dataset,accuracy,precision,recall,f1,n_runs,flags\n";
  for (const auto& c : cells) {
    os << c.subset << ',' << c.strategy << ',' << c.dataset;
    for (std::size_t k = 0; k < 4; ++k) os << ',' << cell_value(c, k);
    std::string flags = c.report ? "" : c.error;
    if (c.report)
      for (const auto& f : c.report->flags) flags += (flags.empty() ? "" : "; ") + f;
    for (auto& ch : flags)
      if (ch == ',' || ch == '\n') ch = ' ';
    os << ',' << (c.report ? c.report->n_runs() : 0) << ',' << flags << '\n';
  }
  return os.str();
}

/// Aligned text table grouped by subset. "±" is two bytes in UTF-8, so widths
/// are counted in code points.
inline std::string table_text(const std::vector<TableCell>& cells) {
  auto width = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
    return n;
  };
  auto pad = [&](const std::string& s, std::size_t w) { return s + std::string(w > width(s) ? w - width(s) : 0, ' '); };
  std::vector<std::vector<std::string>> rows{{"Subset", "Strategy", "Dataset", "Accuracy", "Precision", "Recall", "F1"}};
  for (const auto& c : cells) {
    std::vector<std::string> r{c.subset, c.strategy, c.dataset};
    for (std::size_t k = 0; k < 4; ++k) r.push_back(cell_value(c, k));
    rows.push_back(r);
  }
  std::vector<std::size_t> w(rows[0].size(), 0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) w[i] = std::max(w[i], width(r[i]));
  std::ostringstream os;
  os << "# " << kTableConventions << '\n';
  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    if (ri == 1 || (ri > 1 && rows[ri][0] != rows[ri - 1][0])) {
      std::size_t total = 0;
      for (auto x : w) total += x + 2;
      os << std::string(total - 2, '-') << '\n';
    }
    for (std::size_t i = 0; i < rows[ri].size(); ++i) {
      const std::string cell = (ri > 1 && i == 0 && rows[ri][0] == rows[ri - 1][0]) ? "" : rows[ri][i];
      os << (i + 1 < rows[ri].size() ? pad(cell, w[i] + 2) : cell);
    }
    os << '\n';
  }
  return os.str();
}

inline nlohmann::json table_json(const std::vector<TableCell>& cells) {
  nlohmann::json j = {{"conventions", kTableConventions}, {"cells", nlohmann::json::array()}};
  for (const auto& c : cells) {
    nlohmann::json e = {{"subset", c.subset}, {"strategy", c.strategy}, {"dataset", c.dataset}};
    if (c.report)
      e["report"] = *c.report;
    else
      e["error"] = c.error;
    j["cells"].push_back(e);
  }
  return j;
}

}  // namespace kstl::metrics
