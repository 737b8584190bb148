#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "transadapter/binary_io.hpp"
#include "transadapter/random.hpp"

namespace transadapter {

enum class Domain : std::uint32_t { source = 0, target = 1 };

inline const char *domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }

/// In-memory form of a TDS1 dataset file: u8 RGB pixels, u16 labels.
struct Dataset {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 3;
  std::uint32_t num_classes = 0;
  Domain domain = Domain::source;
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> pixels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_values() const { return std::size_t{height} * width * channels; }

  /// Pixel values of sample i scaled to [0, 1].
  std::vector<double> image(std::size_t i) const {
    std::vector<double> out(image_values());
    const auto *src = pixels.data() + i * image_values();
    for (std::size_t j = 0; j < out.size(); ++j)
      out[j] = src[j] / 255.0;
    return out;
  }

  /// (n, H, W, C) tensor of the selected samples.
  Tensor images(std::span<const std::size_t> indices) const {
    const std::size_t per = image_values();
    std::vector<double> values(indices.size() * per);
    for (std::size_t k = 0; k < indices.size(); ++k) {
      if (indices[k] >= size())
        throw ContractError("Dataset::images: index out of range");
      const auto *src = pixels.data() + indices[k] * per;
      for (std::size_t j = 0; j < per; ++j)
        values[k * per + j] = src[j] / 255.0;
    }
    return Tensor({indices.size(), height, width, channels}, std::move(values));
  }
};

inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> encode_dataset(const Dataset &d) {
  if (d.pixels.size() != d.size() * d.image_values())
    throw ContractError("encode_dataset: pixel buffer does not match header");
  ByteWriter w;
  w.raw("TDS1");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(d.size()));
  w.u32(d.height);
  w.u32(d.width);
  w.u32(d.channels);
  w.u32(d.num_classes);
  w.u32(static_cast<std::uint32_t>(d.domain));
  for (auto l : d.labels)
    w.u16(l);
  w.raw(d.pixels);
  w.seal();
  return w.bytes();
}

inline Dataset decode_dataset(std::span<const std::uint8_t> bytes, const std::string &what = "dataset") {
  ByteReader r(bytes, what);
  if (r.remaining() < 4 || r.str(4) != "TDS1")
    throw FormatError(what + ": bad magic, expected TDS1");
  r.verify_seal();
  const auto version = r.u32();
  if (version != kDatasetVersion)
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  Dataset d;
  const std::uint32_t count = r.u32();
  d.height = r.u32();
  d.width = r.u32();
  d.channels = r.u32();
  d.num_classes = r.u32();
  const std::uint32_t domain = r.u32();
  if (domain > 1)
    r.fail("unknown domain tag " + std::to_string(domain));
  d.domain = static_cast<Domain>(domain);
  const std::size_t expected = std::size_t{count} * 2 + std::size_t{count} * d.image_values();
  if (r.remaining() != expected)
    r.fail("payload is " + std::to_string(r.remaining()) + " bytes, header implies " +
           std::to_string(expected));
  d.labels.resize(count);
  for (auto &l : d.labels) {
    l = r.u16();
    if (l >= d.num_classes)
      r.fail("label out of range");
  }
  auto px = r.take(std::size_t{count} * d.image_values());
  d.pixels.assign(px.begin(), px.end());
  return d;
}

inline void save_dataset(const Dataset &d, const std::filesystem::path &path) {
  write_file(path, encode_dataset(d));
}

inline Dataset load_dataset(const std::filesystem::path &path) {
  return decode_dataset(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Synthetic two-domain benchmark
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::size_t classes = 3;
  std::size_t per_class_train = 200;
  std::size_t per_class_eval = 50;
  std::size_t image_size = 32;
  double intensity = 0.0;    ///< [0,1]: contrast loss and brightening of the target domain
  double rotation_deg = 0.0; ///< extra pose jitter of the target domain, degrees
  double texture = 0.0;      ///< [0,1]: amplitude of striped background texture
  std::uint64_t seed = 1;
};

struct SyntheticSplits {
  Dataset source_train, source_eval, target_train, target_eval;
};

namespace detail {

struct ShapeLatent {
  std::size_t cls;
  double cx, cy, scale, angle;
  double fg[3], bg[3];
  double tex_freq_x, tex_freq_y, tex_phase;
};

inline ShapeLatent draw_latent(std::size_t cls, std::size_t image_size, Rng &rng) {
  const double u = static_cast<double>(image_size) / 32.0;
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * uniform01(rng); };
  ShapeLatent l{};
  l.cls = cls;
  l.cx = uni(12.0, 20.0) * u;
  l.cy = uni(12.0, 20.0) * u;
  l.scale = uni(0.8, 1.2) * u;
  l.angle = uni(-25.0, 25.0) * std::numbers::pi / 180.0;
  for (int c = 0; c < 3; ++c) {
    l.fg[c] = uni(0.55, 1.0);
    l.bg[c] = uni(0.0, 0.2);
  }
  l.tex_freq_x = uni(1.0, 4.0);
  l.tex_freq_y = uni(1.0, 4.0);
  l.tex_phase = uni(0.0, 2.0 * std::numbers::pi);
  return l;
}

/// Fraction of a pixel covered by the class shape (2x2 supersampling).
inline double coverage(const ShapeLatent &l, double px, double py) {
  const double ca = std::cos(l.angle), sa = std::sin(l.angle);
  double hits = 0.0;
  for (double oy : {0.25, 0.75})
    for (double ox : {0.25, 0.75}) {
      const double dx = px + ox - l.cx, dy = py + oy - l.cy;
      const double a = (ca * dx + sa * dy) / l.scale;
      const double b = (-sa * dx + ca * dy) / l.scale;
      bool inside = false;
      switch (l.cls % 3) {
      case 0: // filled ellipse
        inside = (a * a) / (7.0 * 7.0) + (b * b) / (4.0 * 4.0) <= 1.0;
        break;
      case 1: // bar
        inside = std::abs(a) <= 11.0 && std::abs(b) <= 1.8;
        break;
      default: { // ring
        const double r = std::sqrt(a * a + b * b);
        inside = r >= 4.5 && r <= 7.5;
      }
      }
      hits += inside ? 1.0 : 0.0;
    }
  return hits / 4.0;
}

inline void render(const ShapeLatent &l, const SyntheticSpec &spec, bool shifted, Rng &noise,
                   std::uint8_t *out) {
  const std::size_t S = spec.image_size;
  std::normal_distribution<double> jitter(0.0, 0.03);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const double cov = coverage(l, static_cast<double>(x), static_cast<double>(y));
      double tex = 0.0;
      if (shifted && spec.texture > 0.0)
        tex = 0.25 * spec.texture *
              std::sin(2.0 * std::numbers::pi *
                           (l.tex_freq_x * static_cast<double>(x) + l.tex_freq_y * static_cast<double>(y)) /
                           static_cast<double>(S) +
                       l.tex_phase);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = l.bg[c] + tex * (1.0 - cov) + cov * (l.fg[c] - l.bg[c]) + jitter(noise);
        if (shifted && spec.intensity > 0.0)
          v = 0.5 * spec.intensity + v * (1.0 - 0.75 * spec.intensity);
        v = std::clamp(v, 0.0, 1.0);
        out[(y * S + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
}

inline Dataset make_split(const SyntheticSpec &spec, Domain domain, std::size_t per_class,
                          std::uint64_t split_id) {
  Dataset d;
  d.height = d.width = static_cast<std::uint32_t>(spec.image_size);
  d.channels = 3;
  d.num_classes = static_cast<std::uint32_t>(spec.classes);
  d.domain = domain;
  const std::size_t count = per_class * spec.classes;
  d.labels.resize(count);
  d.pixels.resize(count * d.image_values());
  const bool shifted = domain == Domain::target;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = derive_rng(spec.seed, {0x5d47, static_cast<std::uint64_t>(domain), split_id, i});
    const std::size_t cls = i % spec.classes;
    ShapeLatent l = draw_latent(cls, spec.image_size, rng);
    if (shifted && spec.rotation_deg > 0.0)
      l.angle += (2.0 * uniform01(rng) - 1.0) * spec.rotation_deg * std::numbers::pi / 180.0;
    d.labels[i] = static_cast<std::uint16_t>(cls);
    render(l, spec, shifted, rng, d.pixels.data() + i * d.image_values());
  }
  return d;
}

} // namespace detail

/// Pure function of the spec. Every sample draws from its own substream keyed
/// by (domain, split, index).
inline SyntheticSplits generate_synthetic(const SyntheticSpec &spec) {
  if (spec.classes == 0 || spec.classes > 3 || spec.image_size < 8 || spec.image_size % 4 != 0)
    throw ContractError("SyntheticSpec: classes must be in [1,3] and image_size a multiple of 4 >= 8");
  if (spec.intensity < 0.0 || spec.intensity > 1.0 || spec.texture < 0.0 || spec.texture > 1.0 ||
      spec.rotation_deg < 0.0)
    throw ContractError("SyntheticSpec: shift magnitudes out of range");
  SyntheticSplits s;
  s.source_train = detail::make_split(spec, Domain::source, spec.per_class_train, 0);
  s.source_eval = detail::make_split(spec, Domain::source, spec.per_class_eval, 1);
  s.target_train = detail::make_split(spec, Domain::target, spec.per_class_train, 0);
  s.target_eval = detail::make_split(spec, Domain::target, spec.per_class_eval, 1);
  return s;
}

/// Shift used by the adaptation benchmark: intensity plus rotation jitter.
inline constexpr double kBenchmarkIntensity = 0.6;
inline constexpr double kBenchmarkRotationDeg = 30.0;

inline SyntheticSpec benchmark_spec(std::uint64_t seed) {
  SyntheticSpec s;
  s.intensity = kBenchmarkIntensity;
  s.rotation_deg = kBenchmarkRotationDeg;
  s.seed = seed;
  return s;
}

} // namespace transadapter
