#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "kstl/core/errors.hpp"
#include "kstl/data/image.hpp"
#include "kstl/data/records.hpp"

namespace kstl::data {

struct Patch {
  std::string patch_id;
  std::string image_id;
  std::string fragment_id;
  std::string dataset_tag;
  std::size_t x = 0;  // top-left offset in the source image
  std::size_t y = 0;
  std::string class_key;
  View view = View::surface;
  Raster pixels;
  std::string origin_patch_id;  // non-empty for augmented copies made by balance()
};

struct PatchGrid {
  std::size_t edge = 256;
  std::size_t max_overlap = 20;

  std::size_t stride() const { return edge - max_overlap; }
  void validate() const {
    if (edge == 0) throw ConfigError("patch edge must be positive");
    if (max_overlap >= edge)
      throw ConfigError("max overlap " + std::to_string(max_overlap) + " must be smaller than the patch edge " +
                        std::to_string(edge));
  }
};

/// Offsets k * stride for k = 0, 1, ... while offset + edge <= extent.
inline std::vector<std::size_t> grid_positions(std::size_t extent, const PatchGrid& g) {
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p + g.edge <= extent; p += g.stride()) out.push_back(p);
  return out;
}

struct PatchExtraction {
  std::vector<Patch> patches;
  std::optional<std::string> warning;
};

inline Patch crop(const ImageRecord& image, std::size_t x, std::size_t y, std::size_t edge) {
  Patch p;
  p.patch_id = image.image_id + "_y" + std::to_string(y) + "_x" + std::to_string(x);
  p.image_id = image.image_id;
  p.fragment_id = image.fragment_id;
  p.dataset_tag = image.dataset_tag;
  p.x = x;
  p.y = y;
  p.class_key = image.class_key;
  p.view = image.view;
  p.pixels = Raster(edge, edge, image.pixels.channels);
  const std::size_t row = edge * image.pixels.channels;
  for (std::size_t r = 0; r < edge; ++r) {
    const auto* src = &image.pixels.pixels[((y + r) * image.pixels.width + x) * image.pixels.channels];
    std::copy(src, src + row, &p.pixels.pixels[r * row]);
  }
  return p;
}

/// Deterministic grid placement anchored at (0,0), ordered by (y, x).
/// Images smaller than the patch edge yield no patches and a warning.
inline PatchExtraction extract_patches(const ImageRecord& image, const PatchGrid& grid) {
  grid.validate();
  PatchExtraction out;
  if (image.pixels.width < grid.edge || image.pixels.height < grid.edge) {
    out.warning = "image " + image.image_id + " (" + std::to_string(image.pixels.width) + "x" +
                  std::to_string(image.pixels.height) + ") is smaller than the " + std::to_string(grid.edge) +
                  "px patch edge; no patches extracted";
    return out;
  }
  for (std::size_t y : grid_positions(image.pixels.height, grid))
    for (std::size_t x : grid_positions(image.pixels.width, grid)) out.patches.push_back(crop(image, x, y, grid.edge));
  return out;
}

/// Extracts from every record in input order; warnings are collected.
inline std::vector<Patch> extract_all(const std::vector<ImageRecord>& records, const PatchGrid& grid,
                                      std::vector<std::string>* warnings = nullptr) {
  std::vector<Patch> all;
  for (const auto& r : records) {
    auto e = extract_patches(r, grid);
    if (e.warning && warnings) warnings->push_back(*e.warning);
    for (auto& p : e.patches) all.push_back(std::move(p));
  }
  return all;
}

inline const char* kPatchIndexHeader = "patch_id,image_id,fragment_id,x,y,class_key,view";

/// Patch store: <dir>/index.csv plus <dir>/patches/<patch_id>.ppm. The
/// dataset tag is recorded once in <dir>/dataset.txt.
inline void write_patch_store(const std::filesystem::path& dir, const std::vector<Patch>& patches) {
  std::filesystem::create_directories(dir / "patches");
  std::ofstream idx(dir / "index.csv");
  if (!idx) throw IoError("cannot write patch index in " + dir.string());
  idx << kPatchIndexHeader << '\n';
  std::string tag;
  for (const auto& p : patches) {
    if (tag.empty()) tag = p.dataset_tag;
    if (p.dataset_tag != tag) throw DataError("patch store holds one dataset, got " + tag + " and " + p.dataset_tag);
    idx << p.patch_id << ',' << p.image_id << ',' << p.fragment_id << ',' << p.x << ',' << p.y << ',' << p.class_key
        << ',' << to_string(p.view) << '\n';
    write_ppm(dir / "patches" / (p.patch_id + ".ppm"), p.pixels);
  }
  std::ofstream(dir / "dataset.txt") << tag << '\n';
}

inline std::vector<Patch> read_patch_store(const std::filesystem::path& dir) {
  std::ifstream idx(dir / "index.csv");
  if (!idx) throw DataError("no patch index in " + dir.string());
  std::string tag;
  std::ifstream(dir / "dataset.txt") >> tag;
  std::string line;
  std::getline(idx, line);
  if (line != kPatchIndexHeader) throw DataError("patch index header mismatch in " + dir.string());
  std::vector<Patch> out;
  while (std::getline(idx, line)) {
    if (line.empty()) continue;
    const auto c = detail::split_csv_line(line);
    if (c.size() != 7) throw DataError("malformed patch index row: " + line);
    Patch p;
    p.patch_id = c[0];
    p.image_id = c[1];
    p.fragment_id = c[2];
    p.x = std::stoul(c[3]);
    p.y = std::stoul(c[4]);
    p.class_key = c[5];
    p.view = parse_view(c[6]);
    p.dataset_tag = tag;
    p.pixels = read_ppm(dir / "patches" / (p.patch_id + ".ppm"));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace kstl::data
