#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>

#include "json.hpp"
#include "kstl/core/errors.hpp"
#include "kstl/data/image.hpp"
#include "kstl/data/patches.hpp"

namespace kstl::data {

inline constexpr double kWhiteningEpsilon = 1e-6;

/// Per-channel (R, G, B) population mean and standard deviation, tagged with
/// the dataset and split they were computed on.
struct WhiteningStats {
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};
  std::string dataset_tag;
  std::string scope;  // free-form, e.g. "A/mixed/train"
  std::size_t pixel_count = 0;
};

/// Sums are accumulated exactly in integers, so the result does not depend
/// on patch order.
inline WhiteningStats compute_whitening_stats(std::span<const Patch> patches, std::string scope) {
  if (patches.empty()) throw DataError("whitening statistics need at least one patch");
  std::array<unsigned __int128, 3> sum{}, sumsq{};
  std::size_t count = 0;
  const std::string tag = patches.front().dataset_tag;
  for (const auto& p : patches) {
    if (p.dataset_tag != tag) throw DataError("whitening statistics mix datasets " + tag + " and " + p.dataset_tag);
    if (p.pixels.channels != 3) throw DataError("patch " + p.patch_id + " is not RGB");
    const auto& px = p.pixels.pixels;
    for (std::size_t i = 0; i < px.size(); i += 3)
      for (std::size_t c = 0; c < 3; ++c) {
        sum[c] += px[i + c];
        sumsq[c] += static_cast<unsigned>(px[i + c]) * px[i + c];
      }
    count += px.size() / 3;
  }
  WhiteningStats s;
  s.dataset_tag = tag;
  s.scope = std::move(scope);
  s.pixel_count = count;
  const auto n = static_cast<unsigned __int128>(count);
  for (std::size_t c = 0; c < 3; ++c) {
    // var = (n * sumsq - sum^2) / n^2, with an exact integer numerator.
    const unsigned __int128 num = n * sumsq[c] - sum[c] * sum[c];
    s.mean[c] = static_cast<double>(sum[c]) / static_cast<double>(count);
    s.stddev[c] = std::sqrt(static_cast<double>(num) / (static_cast<double>(count) * static_cast<double>(count)));
  }
  return s;
}

/// (value - m_c) / max(sigma_c, 1e-6), per channel. Stats from another
/// dataset are rejected.
template <typename T = float>
Image<T> whiten(const Patch& patch, const WhiteningStats& stats) {
  if (patch.dataset_tag != stats.dataset_tag)
    throw DataError("whitening stats computed on dataset " + stats.dataset_tag + " applied to patch " + patch.patch_id +
                    " of dataset " + patch.dataset_tag);
  Image<T> out(patch.pixels.width, patch.pixels.height, 3);
  std::array<double, 3> inv{};
  for (std::size_t c = 0; c < 3; ++c) inv[c] = 1.0 / std::max(stats.stddev[c], kWhiteningEpsilon);
  const auto& px = patch.pixels.pixels;
  for (std::size_t i = 0; i < px.size(); ++i) {
    const std::size_t c = i % 3;
    out.pixels[i] = static_cast<T>((static_cast<double>(px[i]) - stats.mean[c]) * inv[c]);
  }
  return out;
}

inline void to_json(nlohmann::json& j, const WhiteningStats& s) {
  j = {{"mean", s.mean}, {"stddev", s.stddev}, {"dataset", s.dataset_tag}, {"scope", s.scope},
       {"pixel_count", s.pixel_count}, {"epsilon", kWhiteningEpsilon}};
}
inline void from_json(const nlohmann::json& j, WhiteningStats& s) {
  s.mean = j.at("mean").get<std::array<double, 3>>();
  s.stddev = j.at("stddev").get<std::array<double, 3>>();
  s.dataset_tag = j.at("dataset").get<std::string>();
  s.scope = j.at("scope").get<std::string>();
  s.pixel_count = j.value("pixel_count", std::size_t{0});
}

}  // namespace kstl::data
