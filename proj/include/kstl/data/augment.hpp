#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "kstl/core/errors.hpp"
#include "kstl/core/rng.hpp"
#include "kstl/data/image.hpp"

namespace kstl::data {

/// The dihedral group of the square: identity, two mirror flips, and three
/// rotations (counter-clockwise).
enum class GeometricOp { identity, hflip, vflip, rot90, rot180, rot270 };

inline constexpr std::array<GeometricOp, 6> kGeometricOps{GeometricOp::identity, GeometricOp::hflip,
                                                          GeometricOp::vflip,    GeometricOp::rot90,
                                                          GeometricOp::rot180,   GeometricOp::rot270};

inline std::string to_string(GeometricOp op) {
  static const char* names[] = {"identity", "hflip", "vflip", "rot90", "rot180", "rot270"};
  return names[static_cast<int>(op)];
}

inline GeometricOp inverse(GeometricOp op) {
  if (op == GeometricOp::rot90) return GeometricOp::rot270;
  if (op == GeometricOp::rot270) return GeometricOp::rot90;
  return op;
}

template <typename T>
Image<T> apply_geometric(const Image<T>& in, GeometricOp op) {
  const std::size_t w = in.width, h = in.height, c = in.channels;
  const bool swap = op == GeometricOp::rot90 || op == GeometricOp::rot270;
  Image<T> out(swap ? h : w, swap ? w : h, c);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) {
      std::size_t sx = x, sy = y;
      switch (op) {
        case GeometricOp::identity: break;
        case GeometricOp::hflip: sx = w - 1 - x; break;
        case GeometricOp::vflip: sy = h - 1 - y; break;
        case GeometricOp::rot90: sx = w - 1 - y; sy = x; break;
        case GeometricOp::rot180: sx = w - 1 - x; sy = h - 1 - y; break;
        case GeometricOp::rot270: sx = y; sy = h - 1 - x; break;
      }
      for (std::size_t k = 0; k < c; ++k) out.at(x, y, k) = in.at(sx, sy, k);
    }
  return out;
}

/// Normalized 1-D Gaussian of size 2*ceil(2*sigma)+1.
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0)) throw ConfigError("blur sigma must be positive");
  const int radius = static_cast<int>(std::ceil(2.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  return k;
}

/// Mirror index without repeating the edge sample (…2 1 | 0 1 2 … n-1 | n-2 …).
inline std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<long>(n) ? i : period - i);
}

template <typename T>
Image<T> gaussian_blur(const Image<T>& in, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const long r = static_cast<long>(k.size() / 2);
  const std::size_t w = in.width, h = in.height, c = in.channels;
  std::vector<double> tmp(in.pixels.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (long d = -r; d <= r; ++d) acc += k[d + r] * static_cast<double>(in.at(reflect_index(long(x) + d, w), y, ch));
        tmp[(y * w + x) * c + ch] = acc;
      }
  Image<T> out(w, h, c);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (long d = -r; d <= r; ++d) acc += k[d + r] * tmp[(reflect_index(long(y) + d, h) * w + x) * c + ch];
        if constexpr (std::is_integral_v<T>) {
          acc = std::clamp(std::round(acc), double(std::numeric_limits<T>::min()), double(std::numeric_limits<T>::max()));
        }
        out.at(x, y, ch) = static_cast<T>(acc);
      }
  return out;
}

enum class AugmentPolicy { none, geometric, geometric_blur };

inline std::string to_string(AugmentPolicy p) {
  switch (p) {
    case AugmentPolicy::none: return "none";
    case AugmentPolicy::geometric: return "geometric";
    default: return "geometric+blur";
  }
}

inline AugmentPolicy parse_augment_policy(const std::string& s) {
  if (s == "none") return AugmentPolicy::none;
  if (s == "geometric") return AugmentPolicy::geometric;
  if (s == "geometric+blur") return AugmentPolicy::geometric_blur;
  throw ConfigError("unknown augmentation policy '" + s + "'");
}

struct BlurConfig {
  double probability = 0.5;
  double sigma_min = 0.5;
  double sigma_max = 1.5;
};

/// Counts of the augmentations that actually fired.
struct AugmentTrace {
  std::array<std::size_t, 6> geometric{};
  std::size_t blur = 0;
  std::size_t samples = 0;

  void merge(const AugmentTrace& o) {
    for (std::size_t i = 0; i < geometric.size(); ++i) geometric[i] += o.geometric[i];
    blur += o.blur;
    samples += o.samples;
  }
};

/// geometric: one uniformly drawn element of the dihedral group.
/// geometric+blur: additionally, with BlurConfig::probability, a Gaussian
/// blur with sigma ~ U[sigma_min, sigma_max].
template <typename T>
Image<T> augment(const Image<T>& in, AugmentPolicy policy, Rng& rng, const BlurConfig& blur = {},
                 AugmentTrace* trace = nullptr) {
  if (trace) ++trace->samples;
  if (policy == AugmentPolicy::none) return in;
  const GeometricOp op = kGeometricOps[rng.index(kGeometricOps.size())];
  if (trace) ++trace->geometric[static_cast<int>(op)];
  Image<T> out = apply_geometric(in, op);
  if (policy == AugmentPolicy::geometric_blur && rng.bernoulli(blur.probability)) {
    const double sigma = rng.uniform(blur.sigma_min, blur.sigma_max);
    if (trace) ++trace->blur;
    out = gaussian_blur(out, sigma);
  }
  return out;
}

}  // namespace kstl::data
