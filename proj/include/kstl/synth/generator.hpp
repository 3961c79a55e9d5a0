#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "kstl/core/errors.hpp"
#include "kstl/core/rng.hpp"
#include "kstl/data/augment.hpp"
#include "kstl/data/image.hpp"
#include "kstl/data/records.hpp"

namespace kstl::synth {

using data::ImageRecord;
using data::Raster;
using data::View;

/// Colour and frequency signature of one synthetic class.
struct ClassTexture {
  double hue = 0;        // degrees
  double saturation = 0.6;
  double freq_lo = 0.05;  // cycles per pixel
  double freq_hi = 0.10;
  double grain = 8;       // per-pixel noise amplitude, 0..255 units
};

inline void to_json(nlohmann::json& j, const ClassTexture& t) {
  j = {{"hue", t.hue}, {"saturation", t.saturation}, {"freq_lo", t.freq_lo}, {"freq_hi", t.freq_hi}, {"grain", t.grain}};
}
inline void from_json(const nlohmann::json& j, ClassTexture& t) {
  ClassTexture d;
  t.hue = j.value("hue", d.hue);
  t.saturation = j.value("saturation", d.saturation);
  t.freq_lo = j.value("freq_lo", d.freq_lo);
  t.freq_hi = j.value("freq_hi", d.freq_hi);
  t.grain = j.value("grain", d.grain);
}

/// Six textures arranged as a 3x2 grid: three hue families, two frequency
/// bands. Neighbouring hues and the two bands are what the degradation blurs
/// together.
inline std::vector<ClassTexture> default_textures() {
  std::vector<ClassTexture> t;
  const std::array<double, 3> hues{30, 55, 80};
  for (double h : hues) {
    t.push_back({h, 0.55, 0.06, 0.10, 10});
    t.push_back({h, 0.55, 0.16, 0.24, 10});
  }
  return t;
}

/// Many-class generic textures for the pretraining stand-in. Hues span the
/// full circle and bands are spread wider than the benchmark classes.
inline std::vector<ClassTexture> generic_textures(std::size_t n) {
  std::vector<ClassTexture> t;
  for (std::size_t i = 0; i < n; ++i) {
    const double h = 360.0 * double(i / 3) / double((n + 2) / 3) + 15.0 * double(i % 3);
    const double lo = 0.04 + 0.07 * double(i % 3);
    t.push_back({h, 0.7, lo, lo + 0.06, 12});
  }
  return t;
}

struct SynthSpec {
  std::size_t classes = 6;
  std::vector<ClassTexture> textures;  // empty: default_textures()
  std::size_t images_per_class_per_view = 20;
  std::size_t b_images_per_class_per_view = 6;  // 0: same as domain A
  std::size_t max_fragment_images = 4;
  std::size_t edge = 40;
  double shift = 0.5;  // domain-shift strength in [0, 1]
  std::uint64_t seed = 1;

  const std::vector<ClassTexture>& class_textures() const {
    static const std::vector<ClassTexture> defaults = default_textures();
    return textures.empty() ? defaults : textures;
  }

  void validate() const {
    if (classes < 2) throw ConfigError("synth spec needs at least 2 classes");
    if (class_textures().size() != classes)
      throw ConfigError("synth spec declares " + std::to_string(classes) + " classes but " +
                        std::to_string(class_textures().size()) + " textures");
    if (images_per_class_per_view == 0) throw ConfigError("images_per_class_per_view must be positive");
    if (b_images_per_class_per_view > images_per_class_per_view)
      throw ConfigError("b_images_per_class_per_view cannot exceed images_per_class_per_view");
    if (max_fragment_images == 0) throw ConfigError("max_fragment_images must be positive");
    if (edge < 4) throw ConfigError("synth edge must be at least 4");
    if (shift < 0 || shift > 1) throw ConfigError("shift must lie in [0, 1]");
    for (const auto& t : class_textures())
      if (!(t.freq_lo > 0 && t.freq_hi >= t.freq_lo && t.freq_hi <= 0.5))
        throw ConfigError("texture band must satisfy 0 < freq_lo <= freq_hi <= 0.5");
  }
};

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = {{"classes", s.classes},
       {"textures", s.class_textures()},
       {"images_per_class_per_view", s.images_per_class_per_view},
       {"b_images_per_class_per_view", s.b_images_per_class_per_view},
       {"max_fragment_images", s.max_fragment_images},
       {"edge", s.edge},
       {"shift", s.shift},
       {"seed", s.seed}};
}
inline void from_json(const nlohmann::json& j, SynthSpec& s) {
  SynthSpec d;
  s.classes = j.value("classes", d.classes);
  s.textures = j.value("textures", std::vector<ClassTexture>{});
  s.images_per_class_per_view = j.value("images_per_class_per_view", d.images_per_class_per_view);
  s.b_images_per_class_per_view = j.value("b_images_per_class_per_view", d.b_images_per_class_per_view);
  s.max_fragment_images = j.value("max_fragment_images", d.max_fragment_images);
  s.edge = j.value("edge", d.edge);
  s.shift = j.value("shift", d.shift);
  s.seed = j.value("seed", d.seed);
}

/// Parameters of the domain-B degradation applied to one domain-A raster.
struct Degradation {
  double blur_sigma = 0;
  double hue_shift = 0;  // degrees
  double vignette = 0;   // fractional darkening at the corners
  double noise_std = 0;  // 0..255 units
  std::uint64_t noise_seed = 0;

  bool operator==(const Degradation&) const = default;
};

inline void to_json(nlohmann::json& j, const Degradation& d) {
  j = {{"blur_sigma", d.blur_sigma},
       {"hue_shift", d.hue_shift},
       {"vignette", d.vignette},
       {"noise_std", d.noise_std},
       {"noise_seed", d.noise_seed}};
}
inline void from_json(const nlohmann::json& j, Degradation& d) {
  d.blur_sigma = j.at("blur_sigma").get<double>();
  d.hue_shift = j.at("hue_shift").get<double>();
  d.vignette = j.at("vignette").get<double>();
  d.noise_std = j.at("noise_std").get<double>();
  d.noise_seed = j.at("noise_seed").get<std::uint64_t>();
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
  const double c = v * s;
  const double x = c * (1 - std::abs(std::fmod(h, 2.0) - 1));
  const double m = v - c;
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (auto& v2 : rgb) v2 += m;
  return rgb;
}

/// Latent state shared by every image of one fragment.
struct FragmentLatent {
  struct Wave {
    double freq, angle, amplitude;
  };
  std::array<Wave, 4> waves{};
  double hue_jitter = 0;
  double brightness = 0;
};

inline FragmentLatent draw_latent(const ClassTexture& t, Rng& rng) {
  FragmentLatent f;
  for (auto& w : f.waves) w = {rng.uniform(t.freq_lo, t.freq_hi), rng.uniform(0, std::numbers::pi), rng.uniform(0.5, 1.0)};
  f.hue_jitter = rng.uniform(-6, 6);
  f.brightness = rng.uniform(-0.06, 0.06);
  return f;
}

/// Band-limited sinusoid texture mapped through a two-colour ramp of the
/// class hue. Each image of a fragment draws its own phases.
inline Raster render(const ClassTexture& t, const FragmentLatent& f, std::size_t edge, Rng& rng) {
  std::array<double, 4> phase{};
  for (auto& p : phase) p = rng.uniform(0, 2 * std::numbers::pi);
  const auto dark = hsv_to_rgb(t.hue + f.hue_jitter, t.saturation, 0.35 + f.brightness);
  const auto light = hsv_to_rgb(t.hue + f.hue_jitter + 20, t.saturation * 0.6, 0.85 + f.brightness);
  double norm = 0;
  for (const auto& w : f.waves) norm += w.amplitude;
  Raster r(edge, edge, 3);
  for (std::size_t y = 0; y < edge; ++y)
    for (std::size_t x = 0; x < edge; ++x) {
      double field = 0;
      for (std::size_t k = 0; k < f.waves.size(); ++k) {
        const auto& w = f.waves[k];
        const double u = double(x) * std::cos(w.angle) + double(y) * std::sin(w.angle);
        field += w.amplitude * std::sin(2 * std::numbers::pi * w.freq * u + phase[k]);
      }
      const double s = 0.5 + 0.5 * field / norm;
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = 255.0 * (dark[c] + s * (light[c] - dark[c])) + t.grain * rng.uniform(-1, 1);
        r.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
      }
    }
  return r;
}

inline Degradation draw_degradation(double shift, Rng& rng) {
  Degradation d;
  d.blur_sigma = rng.uniform(0.5, 0.5 + 1.5 * shift);
  d.hue_shift = rng.uniform(-25, 25) * shift;
  d.vignette = rng.uniform(0, 0.5) * shift;
  d.noise_std = rng.uniform(2, 2 + 14 * shift);
  d.noise_seed = rng.next();
  return d;
}

/// Hue rotation about the grey axis.
inline std::array<std::array<double, 3>, 3> hue_rotation(double degrees) {
  const double a = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a), k = (1 - c) / 3.0, q = std::sqrt(1.0 / 3.0) * s;
  return {{{c + k, k - q, k + q}, {k + q, c + k, k - q}, {k - q, k + q, c + k}}};
}

/// Domain-B rendering of a domain-A raster: blur, hue rotation, vignette,
/// additive Gaussian noise, in that order.
inline Raster degrade(const Raster& a, const Degradation& d) {
  data::Image<double> img(a.width, a.height, 3);
  for (std::size_t i = 0; i < a.pixels.size(); ++i) img.pixels[i] = a.pixels[i];
  if (d.blur_sigma > 0) img = data::gaussian_blur(img, d.blur_sigma);
  const auto m = hue_rotation(d.hue_shift);
  Rng noise(d.noise_seed);
  const double cx = (double(a.width) - 1) / 2, cy = (double(a.height) - 1) / 2;
  const double rmax2 = cx * cx + cy * cy;
  Raster out(a.width, a.height, 3);
  for (std::size_t y = 0; y < a.height; ++y)
    for (std::size_t x = 0; x < a.width; ++x) {
      const double r2 = ((double(x) - cx) * (double(x) - cx) + (double(y) - cy) * (double(y) - cy)) / std::max(rmax2, 1.0);
      const double gain = 1 - d.vignette * r2;
      std::array<double, 3> px{img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2)};
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (m[c][0] * px[0] + m[c][1] * px[1] + m[c][2] * px[2]) * gain + d.noise_std * noise.normal();
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
      }
    }
  return out;
}

inline std::vector<std::string> class_keys_for(const std::string& tag, std::size_t classes) {
  if (classes == 6 && tag == "A") return data::dataset_a_keys();
  if (classes == 6 && tag == "B") return data::dataset_b_keys();
  std::vector<std::string> k;
  for (std::size_t i = 0; i < classes; ++i) k.push_back(tag + (i < 10 ? "0" : "") + std::to_string(i));
  return k;
}

struct SynthDataset {
  SynthSpec spec;
  std::vector<ImageRecord> a;
  std::vector<ImageRecord> b;
  std::vector<Degradation> degradations;  // aligned with b
  std::vector<std::size_t> b_source;      // index into a of each b image
};

namespace detail {

/// Draws fragment sizes in [1, max] summing to total.
inline std::vector<std::size_t> fragment_sizes(std::size_t total, std::size_t max, Rng& rng) {
  std::vector<std::size_t> sizes;
  while (total > 0) {
    const std::size_t n = std::min(total, 1 + rng.index(max));
    sizes.push_back(n);
    total -= n;
  }
  return sizes;
}

template <typename Emit>
void for_each_image(const SynthSpec& spec, const std::vector<ClassTexture>& textures, const std::string& tag,
                    std::uint64_t seed, Emit&& emit) {
  const auto keys = class_keys_for(tag, textures.size());
  for (std::size_t c = 0; c < textures.size(); ++c) {
    Rng rng(derive_seed(seed, "synth/class/" + tag, c));
    const auto sizes = fragment_sizes(2 * spec.images_per_class_per_view, spec.max_fragment_images, rng);
    std::size_t image = 0;
    for (std::size_t f = 0; f < sizes.size(); ++f) {
      const auto latent = draw_latent(textures[c], rng);
      char frag[64];
      std::snprintf(frag, sizeof frag, "%s_%s_f%03zu", tag.c_str(), keys[c].c_str(), f);
      for (std::size_t k = 0; k < sizes[f]; ++k, ++image) {
        ImageRecord r;
        r.fragment_id = frag;
        r.image_id = r.fragment_id + "_i" + std::to_string(k);
        r.dataset_tag = tag;
        r.class_key = keys[c];
        // Alternating views give exactly images_per_class_per_view of each.
        r.view = image % 2 == 0 ? View::surface : View::section;
        r.path = "images/" + r.image_id + ".ppm";
        r.pixels = render(textures[c], latent, spec.edge, rng);
        emit(c, std::move(r));
      }
    }
  }
}

}  // namespace detail

/// Renders both domains in memory. Domain B shares the fragment latents of
/// domain A: its images are degrade() of the first 2 * b_images_per_class_per_view
/// A images of each class, so views stay balanced and B may be the scarcer domain.
inline SynthDataset generate(const SynthSpec& spec) {
  spec.validate();
  SynthDataset d;
  d.spec = spec;
  detail::for_each_image(spec, spec.class_textures(), "A", spec.seed,
                         [&](std::size_t, ImageRecord r) { d.a.push_back(std::move(r)); });
  const auto b_keys = class_keys_for("B", spec.classes);
  const auto a_keys = class_keys_for("A", spec.classes);
  const std::size_t b_per_class =
      2 * (spec.b_images_per_class_per_view ? spec.b_images_per_class_per_view : spec.images_per_class_per_view);
  std::vector<std::size_t> taken(spec.classes, 0);
  Rng rng(derive_seed(spec.seed, "synth/degrade"));
  for (std::size_t ia = 0; ia < d.a.size(); ++ia) {
    const auto& ra = d.a[ia];
    const std::size_t c = static_cast<std::size_t>(data::class_index(a_keys, ra.class_key));
    if (taken[c]++ >= b_per_class) continue;
    ImageRecord rb = ra;
    rb.dataset_tag = "B";
    rb.class_key = b_keys[c];
    rb.fragment_id = "B" + ra.fragment_id.substr(1);
    rb.fragment_id.replace(2, a_keys[c].size(), b_keys[c]);
    rb.image_id = rb.fragment_id + ra.image_id.substr(ra.fragment_id.size());
    rb.path = "images/" + rb.image_id + ".ppm";
    d.b_source.push_back(ia);
    d.degradations.push_back(draw_degradation(spec.shift, rng));
    rb.pixels = degrade(ra.pixels, d.degradations.back());
    d.b.push_back(std::move(rb));
  }
  return d;
}

/// Generic many-class dataset (tag "G") for the pretraining stage.
inline std::vector<ImageRecord> generate_generic(std::size_t classes, std::size_t images_per_class_per_view,
                                                 std::size_t edge, std::uint64_t seed) {
  SynthSpec spec;
  spec.classes = classes;
  spec.textures = generic_textures(classes);
  spec.images_per_class_per_view = images_per_class_per_view;
  spec.b_images_per_class_per_view = 0;
  spec.edge = edge;
  spec.validate();
  std::vector<ImageRecord> out;
  detail::for_each_image(spec, spec.textures, "G", seed, [&](std::size_t, ImageRecord r) { out.push_back(std::move(r)); });
  return out;
}

inline void write_records(const std::filesystem::path& dir, const std::vector<ImageRecord>& records) {
  std::filesystem::create_directories(dir / "images");
  for (const auto& r : records) data::write_ppm(dir / r.path, r.pixels);
  data::write_manifest(dir / "manifest.csv", records);
}

/// Writes <out>/spec.json, <out>/A/{manifest.csv,images/}, <out>/B/... and
/// the per-image degradation log <out>/B/degradation.csv.
inline void write_dataset(const std::filesystem::path& out, const SynthDataset& d) {
  std::filesystem::create_directories(out);
  write_records(out / "A", d.a);
  write_records(out / "B", d.b);
  std::ofstream log(out / "B" / "degradation.csv");
  if (!log) throw IoError("cannot write degradation log in " + out.string());
  log << "image_id,source_image_id,blur_sigma,hue_shift,vignette,noise_std,noise_seed\n";
  log.precision(17);
  for (std::size_t i = 0; i < d.b.size(); ++i) {
    const auto& g = d.degradations[i];
    log << d.b[i].image_id << ',' << d.a[d.b_source[i]].image_id << ',' << g.blur_sigma << ',' << g.hue_shift << ','
        << g.vignette << ',' << g.noise_std << ',' << g.noise_seed << '\n';
  }
  std::ofstream(out / "spec.json") << nlohmann::json(d.spec).dump(2) << '\n';
}

}  // namespace kstl::synth
