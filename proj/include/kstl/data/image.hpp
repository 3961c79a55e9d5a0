#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "kstl/core/errors.hpp"

namespace kstl::data {

/// Interleaved (HWC) image with `channels` values per pixel.
template <typename T>
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<T> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c = 3, T fill = T{})
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  T& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  const T& at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }

  bool operator==(const Image&) const = default;
};

using Raster = Image<std::uint8_t>;

/// Reads a binary PPM (P6, maxval 255).
inline Raster read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open raster " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (f.get(c)) {
      if (c == '#') {
        std::string line;
        std::getline(f, line);
      } else if (!std::isspace(static_cast<unsigned char>(c))) {
        t.push_back(c);
        break;
      }
    }
    while (f.get(c) && !std::isspace(static_cast<unsigned char>(c))) t.push_back(c);
    return t;
  };
  if (token() != "P6") throw DataError(path.string() + " is not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw DataError(path.string() + " has a malformed PPM header");
  }
  if (maxval != 255) throw DataError(path.string() + ": only 8-bit PPM (maxval 255) is supported");
  Raster r(w, h, 3);
  f.read(reinterpret_cast<char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
  if (static_cast<std::size_t>(f.gcount()) != r.pixels.size()) throw DataError(path.string() + " is truncated");
  return r;
}

inline void write_ppm(const std::filesystem::path& path, const Raster& r) {
  if (r.channels != 3) throw DataError("PPM output needs 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write raster " + path.string());
  f << "P6\n" << r.width << ' ' << r.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
}

}  // namespace kstl::data
