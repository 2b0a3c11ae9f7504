#pragma once

// Datasets: IDX ingestion, seeded synthetic ID/OOD generation, normalization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "pvit/errors.hpp"
#include "pvit/image.hpp"
#include "pvit/rng.hpp"

namespace pvit {

enum class DatasetRole { id_train, id_test, ood_test };

inline std::string to_string(DatasetRole r) {
  switch (r) {
    case DatasetRole::id_train: return "id-train";
    case DatasetRole::id_test: return "id-test";
    case DatasetRole::ood_test: return "ood-test";
  }
  return "unknown";
}

/// Per-channel affine preprocessing applied to a dataset.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;

  bool operator==(const Normalization&) const = default;
};

struct Dataset {
  std::string name;
  DatasetRole role = DatasetRole::id_train;
  std::vector<Image> images;
  std::optional<std::vector<std::size_t>> labels;
  std::vector<std::string> ids;
  std::size_t num_classes = 0;
  std::optional<Normalization> normalization;

  std::size_t size() const { return images.size(); }

  void validate() const {
    if (ids.size() != images.size()) throw FormatError(name + ": id count does not match images");
    for (const auto& img : images) {
      if (img.height != images.front().height || img.width != images.front().width ||
          img.channels != images.front().channels) {
        throw FormatError(name + ": images do not share one shape");
      }
    }
    if (labels) {
      if (labels->size() != images.size()) throw FormatError(name + ": label count does not match images");
      for (auto l : *labels) {
        if (l >= num_classes) {
          throw FormatError(name + ": label " + std::to_string(l) + " outside [0," +
                            std::to_string(num_classes) + ")");
        }
      }
    }
  }

  bool operator==(const Dataset&) const = default;
};

inline std::string sample_id(const std::string& dataset, std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05zu", index);
  return dataset + "-" + buf;
}

inline void assign_ids(Dataset& d) {
  d.ids.resize(d.images.size());
  for (std::size_t i = 0; i < d.images.size(); ++i) d.ids[i] = sample_id(d.name, i);
}

// ---------------------------------------------------------------------------
// IDX

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t off,
                               const std::string& path) {
  if (off + 4 > buf.size()) throw FormatError("'" + path + "': truncated IDX header");
  return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) |
         (std::uint32_t{buf[off + 2]} << 8) | std::uint32_t{buf[off + 3]};
}

inline void write_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

inline std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads big-endian IDX images (and optionally labels); bytes scale to [0,1].
inline Dataset load_idx(const std::string& images_path,
                        const std::optional<std::string>& labels_path = std::nullopt,
                        const std::string& name = "idx", DatasetRole role = DatasetRole::id_train) {
  const auto buf = detail::read_file(images_path);
  const auto magic = detail::read_be32(buf, 0, images_path);
  if (magic != kIdxImageMagic) {
    throw FormatError("'" + images_path + "': bad IDX image magic " + detail::hex32(magic) +
                      " (expected " + detail::hex32(kIdxImageMagic) + ")");
  }
  const std::size_t n = detail::read_be32(buf, 4, images_path);
  const std::size_t rows = detail::read_be32(buf, 8, images_path);
  const std::size_t cols = detail::read_be32(buf, 12, images_path);
  const std::size_t pixels = rows * cols;
  if (buf.size() < 16 + n * pixels) {
    throw FormatError("'" + images_path + "': truncated payload, expected " +
                      std::to_string(n * pixels) + " bytes, found " + std::to_string(buf.size() - 16));
  }
  Dataset d;
  d.name = name;
  d.role = role;
  d.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Image img(rows, cols, 1);
    for (std::size_t p = 0; p < pixels; ++p) img.pixels[p] = buf[16 + i * pixels + p] / 255.0;
    d.images.push_back(std::move(img));
  }
  if (labels_path) {
    const auto lb = detail::read_file(*labels_path);
    const auto lmagic = detail::read_be32(lb, 0, *labels_path);
    if (lmagic != kIdxLabelMagic) {
      throw FormatError("'" + *labels_path + "': bad IDX label magic " + detail::hex32(lmagic) +
                        " (expected " + detail::hex32(kIdxLabelMagic) + ")");
    }
    const std::size_t ln = detail::read_be32(lb, 4, *labels_path);
    if (ln != n) {
      throw FormatError("label count " + std::to_string(ln) + " in '" + *labels_path +
                        "' does not match image count " + std::to_string(n));
    }
    if (lb.size() < 8 + n) throw FormatError("'" + *labels_path + "': truncated payload");
    std::vector<std::size_t> labels(lb.begin() + 8, lb.begin() + 8 + static_cast<std::ptrdiff_t>(n));
    d.num_classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
    d.labels = std::move(labels);
  }
  assign_ids(d);
  return d;
}

/// Writes single-channel images (values in [0,1], rounded to bytes) and,
/// when present, labels as IDX files.
inline void write_idx(const Dataset& d, const std::string& images_path,
                      const std::optional<std::string>& labels_path = std::nullopt) {
  if (d.images.empty()) throw FormatError("write_idx: empty dataset");
  const auto& first = d.images.front();
  if (first.channels != 1) throw FormatError("write_idx: only single-channel images are supported");
  std::ofstream out(images_path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + images_path + "'");
  detail::write_be32(out, kIdxImageMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(d.images.size()));
  detail::write_be32(out, static_cast<std::uint32_t>(first.height));
  detail::write_be32(out, static_cast<std::uint32_t>(first.width));
  for (const auto& img : d.images) {
    for (double v : img.pixels) {
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
    }
  }
  if (labels_path && d.labels) {
    std::ofstream lo(*labels_path, std::ios::binary);
    if (!lo) throw FormatError("cannot write '" + *labels_path + "'");
    detail::write_be32(lo, kIdxLabelMagic);
    detail::write_be32(lo, static_cast<std::uint32_t>(d.labels->size()));
    for (auto l : *d.labels) lo.put(static_cast<char>(static_cast<unsigned char>(l)));
  }
}

// ---------------------------------------------------------------------------
// Synthetic data

enum class PatternFamily {
  stripes,  // oriented sinusoidal gratings
  rings,    // concentric sinusoidal rings
};

inline PatternFamily parse_pattern_family(const std::string& s) {
  if (s == "stripes") return PatternFamily::stripes;
  if (s == "rings") return PatternFamily::rings;
  throw ConfigError("unknown pattern family '" + s + "'");
}

inline std::string to_string(PatternFamily f) {
  return f == PatternFamily::rings ? "rings" : "stripes";
}

/// Class c of K uses frequency freq_lo + (freq_hi - freq_lo) * c / (K-1)
/// (cycles per image) and orientation pi * (c + theta_offset) / K.
struct SynthSpec {
  std::size_t classes = 4;
  std::size_t per_class = 100;
  PatternFamily family = PatternFamily::stripes;
  double noise = 0.25;
  std::uint64_t seed = 7;
  std::size_t image_size = 28;
  double freq_lo = 2.0;
  double freq_hi = 4.0;
  double theta_offset = 0.0;
};

struct PatternParams {
  double theta;
  double freq;
  double phase;
};

inline PatternParams class_pattern(const SynthSpec& spec, std::size_t c) {
  const double k = static_cast<double>(spec.classes);
  const double t = spec.classes > 1 ? static_cast<double>(c) / (k - 1.0) : 0.0;
  return {std::numbers::pi * (static_cast<double>(c) + spec.theta_offset) / k,
          spec.freq_lo + (spec.freq_hi - spec.freq_lo) * t, 0.25 * std::numbers::pi * static_cast<double>(c)};
}

/// Noise-free base image of one pattern.
inline Image render_pattern(PatternFamily family, const PatternParams& p, std::size_t size) {
  Image img(size, size, 1);
  const double s = static_cast<double>(size);
  const double c = std::cos(p.theta), sn = std::sin(p.theta);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / s - 0.5;
      const double v = (static_cast<double>(y) + 0.5) / s - 0.5;
      const double coord = family == PatternFamily::stripes ? u * c + v * sn : std::hypot(u, v);
      img.at(y, x) = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * p.freq * coord + p.phase);
    }
  }
  return img;
}

namespace detail {

inline void add_noise(Image& img, double sigma, CounterRng& rng) {
  if (sigma <= 0.0) return;
  for (auto& v : img.pixels) v = std::clamp(v + sigma * rng.normal(), 0.0, 1.0);
}

}  // namespace detail

/// Class-major labeled dataset: per_class noisy copies of each class pattern.
inline Dataset synth_dataset(const SynthSpec& spec, const std::string& name = "synth",
                             DatasetRole role = DatasetRole::id_train) {
  if (spec.classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (spec.per_class < 1) throw ConfigError("synthetic dataset needs at least 1 sample per class");
  if (spec.image_size < 1) throw ConfigError("synthetic image size must be positive");
  if (!(spec.noise >= 0.0)) throw ConfigError("noise sigma must be nonnegative");
  Dataset d;
  d.name = name;
  d.role = role;
  d.num_classes = spec.classes;
  d.labels.emplace();
  CounterRng rng(spec.seed, /*stream=*/0x4e4f);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    const Image base = render_pattern(spec.family, class_pattern(spec, c), spec.image_size);
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      Image img = base;
      detail::add_noise(img, spec.noise, rng);
      d.images.push_back(std::move(img));
      d.labels->push_back(c);
    }
  }
  assign_ids(d);
  return d;
}

struct IdSplits {
  Dataset train;
  Dataset test;
};

/// Generates train_per_class + test_per_class samples per class and
/// partitions each class by a seeded permutation of its indices.
inline IdSplits make_id_splits(SynthSpec spec, std::size_t train_per_class,
                               std::size_t test_per_class) {
  if (train_per_class == 0 || test_per_class == 0) throw ConfigError("split sizes must be positive");
  spec.per_class = train_per_class + test_per_class;
  Dataset all = synth_dataset(spec, "all", DatasetRole::id_train);
  IdSplits s;
  for (Dataset* d : {&s.train, &s.test}) {
    d->num_classes = spec.classes;
    d->labels.emplace();
  }
  s.train.name = "id-train";
  s.train.role = DatasetRole::id_train;
  s.test.name = "id-test";
  s.test.role = DatasetRole::id_test;
  CounterRng rng(spec.seed, /*stream=*/0x5350);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    std::vector<std::size_t> idx(spec.per_class);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = c * spec.per_class + i;
    shuffle(std::span<std::size_t>(idx), rng);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Dataset& dst = i < train_per_class ? s.train : s.test;
      dst.images.push_back(all.images[idx[i]]);
      dst.labels->push_back(c);
    }
  }
  assign_ids(s.train);
  assign_ids(s.test);
  return s;
}

enum class OodKind { uniform_noise, pattern_shift, inverted };

inline OodKind parse_ood_kind(const std::string& s) {
  if (s == "uniform-noise") return OodKind::uniform_noise;
  if (s == "pattern-shift") return OodKind::pattern_shift;
  if (s == "inverted") return OodKind::inverted;
  throw ConfigError("unknown OOD kind '" + s + "' (uniform-noise | pattern-shift | inverted)");
}

inline std::string to_string(OodKind k) {
  switch (k) {
    case OodKind::uniform_noise: return "uniform-noise";
    case OodKind::pattern_shift: return "pattern-shift";
    case OodKind::inverted: return "inverted";
  }
  return "unknown";
}

struct OodSpec {
  OodKind kind = OodKind::uniform_noise;
  std::uint64_t seed = 11;
  std::size_t n = 400;
};

/// Pattern parameters used for pattern-shift OOD: frequencies above the ID
/// range and orientations halfway between ID orientations.
inline SynthSpec shifted_spec(const SynthSpec& id) {
  SynthSpec s = id;
  const double width = std::max(id.freq_hi - id.freq_lo, 1.0);
  s.freq_lo = id.freq_hi + width;
  s.freq_hi = s.freq_lo + width;
  s.theta_offset = id.theta_offset + 0.5;
  return s;
}

inline Image invert(Image img) {
  for (auto& v : img.pixels) v = 1.0 - v;
  return img;
}

/// OOD set named "ood-<kind>". `id_spec` supplies the image geometry and noise
/// level; for `inverted` its images are mapped x -> 1 - x.
inline Dataset make_ood(const OodSpec& spec, const SynthSpec& id_spec, const Dataset* id_test = nullptr) {
  if (spec.n == 0 && spec.kind != OodKind::inverted) throw ConfigError("OOD set size must be positive");
  Dataset d;
  d.name = "ood-" + to_string(spec.kind);
  d.role = DatasetRole::ood_test;
  switch (spec.kind) {
    case OodKind::uniform_noise: {
      CounterRng rng(spec.seed, /*stream=*/0x554e);
      for (std::size_t i = 0; i < spec.n; ++i) {
        Image img(id_spec.image_size, id_spec.image_size, 1);
        for (auto& v : img.pixels) v = rng.uniform();
        d.images.push_back(std::move(img));
      }
      break;
    }
    case OodKind::pattern_shift: {
      SynthSpec s = shifted_spec(id_spec);
      s.seed = spec.seed;
      s.per_class = (spec.n + s.classes - 1) / s.classes;
      Dataset g = synth_dataset(s, d.name, DatasetRole::ood_test);
      g.images.resize(spec.n);
      d.images = std::move(g.images);
      break;
    }
    case OodKind::inverted: {
      if (id_test == nullptr) throw ConfigError("inverted OOD set needs the ID test images");
      if (id_test->normalization) throw ConfigError("inverted OOD set must be built before normalization");
      const std::size_t n = spec.n == 0 ? id_test->size() : std::min(spec.n, id_test->size());
      for (std::size_t i = 0; i < n; ++i) d.images.push_back(invert(id_test->images[i]));
      break;
    }
  }
  assign_ids(d);
  return d;
}

// ---------------------------------------------------------------------------
// Normalization

inline Dataset normalize(Dataset d, const std::vector<double>& mean, const std::vector<double>& stddev) {
  if (d.normalization) throw ConfigError(d.name + ": dataset is already normalized");
  const std::size_t c = d.images.empty() ? mean.size() : d.images.front().channels;
  if (mean.size() != c || stddev.size() != c) {
    throw ConfigError(d.name + ": normalization needs one mean/std per channel (" +
                      std::to_string(c) + ")");
  }
  for (double s : stddev) {
    if (!(s > 0.0)) throw ConfigError(d.name + ": normalization std must be positive");
  }
  for (auto& img : d.images) {
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      const std::size_t ch = i % c;
      img.pixels[i] = (img.pixels[i] - mean[ch]) / stddev[ch];
    }
  }
  d.normalization = Normalization{mean, stddev};
  return d;
}

inline Dataset normalize(Dataset d, double mean, double stddev) {
  const std::size_t c = d.images.empty() ? 1 : d.images.front().channels;
  return normalize(std::move(d), std::vector<double>(c, mean), std::vector<double>(c, stddev));
}

inline Dataset denormalize(Dataset d) {
  if (!d.normalization) return d;
  const auto& n = *d.normalization;
  const std::size_t c = n.mean.size();
  for (auto& img : d.images) {
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      img.pixels[i] = img.pixels[i] * n.stddev[i % c] + n.mean[i % c];
    }
  }
  d.normalization.reset();
  return d;
}

}  // namespace pvit
