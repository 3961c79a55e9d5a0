#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kstl/core/errors.hpp"
#include "kstl/data/image.hpp"

namespace kstl::data {

enum class View { surface, section };

inline std::string to_string(View v) { return v == View::surface ? "surface" : "section"; }

inline View parse_view(const std::string& s) {
  if (s == "surface") return View::surface;
  if (s == "section") return View::section;
  throw DataError("unknown view '" + s + "' (expected surface|section)");
}

/// Which views a training/evaluation run draws from.
enum class Subset { surface, section, mixed };

inline std::string to_string(Subset s) {
  switch (s) {
    case Subset::surface: return "surface";
    case Subset::section: return "section";
    default: return "mixed";
  }
}

inline Subset parse_subset(const std::string& s) {
  if (s == "surface") return Subset::surface;
  if (s == "section") return Subset::section;
  if (s == "mixed") return Subset::mixed;
  throw ConfigError("unknown subset '" + s + "' (expected surface|section|mixed)");
}

inline bool in_subset(View v, Subset s) {
  return s == Subset::mixed || (s == Subset::surface) == (v == View::surface);
}

struct ImageRecord {
  std::string image_id;
  std::string fragment_id;
  std::string dataset_tag;
  std::string class_key;
  View view = View::surface;
  std::string path;  // as written in the manifest
  Raster pixels;
};

/// Declared class-key set per dataset tag. Index order is the label order.
using DatasetCatalog = std::map<std::string, std::vector<std::string>>;

inline const std::vector<std::string>& dataset_a_keys() {
  static const std::vector<std::string> k{"WW", "CAR", "CAR2", "STR", "BRU", "CYS"};
  return k;
}
inline const std::vector<std::string>& dataset_b_keys() {
  static const std::vector<std::string> k{"WW", "WD", "AU", "STR", "BRU", "CYS"};
  return k;
}

inline DatasetCatalog default_catalog() { return {{"A", dataset_a_keys()}, {"B", dataset_b_keys()}}; }

inline int class_index(const std::vector<std::string>& keys, const std::string& key) {
  auto it = std::find(keys.begin(), keys.end(), key);
  if (it == keys.end()) throw DataError("class key '" + key + "' not in the declared key set");
  return static_cast<int>(it - keys.begin());
}

struct ViewCounts {
  std::size_t surface = 0;
  std::size_t section = 0;
  std::size_t mixed() const { return surface + section; }
  bool operator==(const ViewCounts&) const = default;
};

/// Image inventory per class key for dataset A (CCD camera) and B
/// (endoscope), surface and section views.
inline const std::map<std::string, ViewCounts>& table1_inventory(const std::string& dataset) {
  static const std::map<std::string, ViewCounts> a{{"WW", {50, 74}},  {"CAR", {18, 18}}, {"CAR2", {36, 18}},
                                                   {"STR", {25, 19}}, {"BRU", {43, 17}}, {"CYS", {37, 11}}};
  static const std::map<std::string, ViewCounts> b{{"WW", {62, 25}},  {"WD", {13, 12}},  {"AU", {58, 50}},
                                                   {"STR", {43, 24}}, {"BRU", {23, 4}},  {"CYS", {47, 48}}};
  if (dataset == "A") return a;
  if (dataset == "B") return b;
  throw ConfigError("no inventory for dataset '" + dataset + "'");
}

struct ManifestAudit {
  std::map<std::string, ViewCounts> per_class;
  ViewCounts total;
};

inline ManifestAudit audit(const std::vector<ImageRecord>& records) {
  ManifestAudit a;
  for (const auto& r : records) {
    auto& c = a.per_class[r.class_key];
    auto& field = r.view == View::surface ? c.surface : c.section;
    auto& total = r.view == View::surface ? a.total.surface : a.total.section;
    ++field;
    ++total;
  }
  return a;
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  for (auto& c : out)
    if (!c.empty() && c.back() == '\r') c.pop_back();
  return out;
}
}  // namespace detail

inline const char* kManifestHeader = "image_id,fragment_id,dataset,class_key,view,path";

/// Reads a manifest CSV (header image_id,fragment_id,dataset,class_key,view,path;
/// paths relative to the manifest's directory) and loads every raster.
inline std::vector<ImageRecord> load_manifest(const std::filesystem::path& path,
                                              const DatasetCatalog& catalog = default_catalog()) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(f, line)) return {};
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader)
    throw DataError(path.string() + ": header must be '" + std::string(kManifestHeader) + "'");
  const auto base = path.parent_path();
  std::vector<ImageRecord> records;
  std::set<std::string> ids;
  std::map<std::string, std::string> fragment_class;
  std::map<std::string, Raster> raster_cache;
  std::size_t row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    const std::string where = path.filename().string() + " row " + std::to_string(row);
    if (cells.size() != 6) throw DataError(where + ": expected 6 columns, got " + std::to_string(cells.size()));
    ImageRecord r;
    r.image_id = cells[0];
    r.fragment_id = cells[1];
    r.dataset_tag = cells[2];
    r.class_key = cells[3];
    r.path = cells[5];
    try {
      r.view = parse_view(cells[4]);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    if (r.image_id.empty()) throw DataError(where + ": empty image_id");
    if (r.fragment_id.empty()) throw DataError(where + ": empty fragment_id");
    if (!ids.insert(r.image_id).second) throw DataError(where + ": duplicate image_id '" + r.image_id + "'");
    auto cat = catalog.find(r.dataset_tag);
    if (cat == catalog.end()) throw DataError(where + ": unknown dataset '" + r.dataset_tag + "'");
    if (std::find(cat->second.begin(), cat->second.end(), r.class_key) == cat->second.end())
      throw DataError(where + ": unknown class key '" + r.class_key + "' for dataset " + r.dataset_tag);
    auto [it, fresh] = fragment_class.emplace(r.dataset_tag + "/" + r.fragment_id, r.class_key);
    if (!fresh && it->second != r.class_key)
      throw DataError(where + ": fragment '" + r.fragment_id + "' already has class " + it->second);
    auto cached = raster_cache.find(r.path);
    if (cached == raster_cache.end()) {
      try {
        cached = raster_cache.emplace(r.path, read_ppm(base / r.path)).first;
      } catch (const DataError& e) {
        throw DataError(where + ": unreadable raster: " + e.what());
      }
    }
    r.pixels = cached->second;
    records.push_back(std::move(r));
  }
  return records;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ImageRecord>& records) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write manifest " + path.string());
  f << kManifestHeader << '\n';
  for (const auto& r : records) {
    for (const auto* s : {&r.image_id, &r.fragment_id, &r.dataset_tag, &r.class_key, &r.path})
      if (s->find(',') != std::string::npos) throw DataError("manifest field contains a comma: " + *s);
    f << r.image_id << ',' << r.fragment_id << ',' << r.dataset_tag << ',' << r.class_key << ',' << to_string(r.view)
      << ',' << r.path << '\n';
  }
}

}  // namespace kstl::data
