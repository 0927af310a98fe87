#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "jea/augment.hpp"
#include "jea/image.hpp"
#include "jea/rng.hpp"

namespace jea {

// Images are kept as 8-bit CHW; image(i) decodes to [0,1] floats.
struct Dataset {
  std::size_t channels = 3, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return channels * height * width; }

  Image image(std::size_t i) const {
    Image img(channels, height, width);
    const auto* src = pixels.data() + i * image_bytes();
    for (std::size_t k = 0; k < img.pixels.size(); ++k) img.pixels[k] = static_cast<float>(src[k]) / 255.0f;
    return img;
  }

  void push(const Image& img, int label) {
    if (img.channels != channels || img.height != height || img.width != width)
      throw DimensionError("dataset: image shape mismatch");
    for (float v : img.pixels)
      pixels.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    labels.push_back(label);
  }

  Dataset subset(const std::vector<std::size_t>& indices) const {
    Dataset out;
    out.channels = channels;
    out.height = height;
    out.width = width;
    out.num_classes = num_classes;
    out.provenance = provenance;
    out.pixels.reserve(indices.size() * image_bytes());
    for (auto i : indices) {
      if (i >= size()) throw DimensionError("dataset: subset index out of range");
      auto first = pixels.begin() + static_cast<std::ptrdiff_t>(i * image_bytes());
      out.pixels.insert(out.pixels.end(), first, first + static_cast<std::ptrdiff_t>(image_bytes()));
      out.labels.push_back(labels[i]);
    }
    return out;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&](std::uint8_t b) {
      h ^= b;
      h *= 1099511628211ULL;
    };
    for (auto b : pixels) feed(b);
    for (int l : labels) feed(static_cast<std::uint8_t>(l));
    return h;
  }
};

inline std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(p.begin(), p.end());
  return p;
}

// First k entries of a fixed permutation of [0, n): a smaller k always
// yields a prefix of a larger one.
inline std::vector<std::size_t> nested_subsample_indices(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k > n) throw ParameterError("subsample: k exceeds dataset size");
  auto p = seeded_permutation(n, derive_seed(seed, stream_tag::subsample));
  p.resize(k);
  return p;
}

inline Dataset subsample(const Dataset& ds, std::size_t k, std::uint64_t seed) {
  return ds.subset(nested_subsample_indices(ds.size(), k, seed));
}

// ---------------------------------------------------------------------------
// Synthetic shapes

enum class ShapeKind { Disk, Square, Triangle, Plus, Stripes, Frame, Ring };
inline constexpr std::size_t kShapeClassKinds = 6;  // Ring is reserved for hue-coded classes

struct SyntheticSpec {
  std::size_t n_samples = 20000;
  std::size_t n_classes = 10;
  std::size_t image_size = 40;
  std::size_t render_size = 64;
  double shape_fraction = 0.6;
  double color_fraction = 0.4;
  double noise_std = 0.03;
  std::uint64_t seed = 0;

  std::size_t shape_classes() const {
    return static_cast<std::size_t>(std::llround(shape_fraction * static_cast<double>(n_classes)));
  }
  std::size_t color_classes() const { return n_classes - shape_classes(); }

  void validate() const {
    if (n_classes < 2) throw ConfigError("synthetic: n_classes must be at least 2");
    if (shape_fraction < 0.0 || color_fraction < 0.0 || std::abs(shape_fraction + color_fraction - 1.0) > 1e-9)
      throw ConfigError("synthetic: class fractions must be non-negative and sum to 1");
    if (shape_classes() > kShapeClassKinds)
      throw ConfigError("synthetic: at most " + std::to_string(kShapeClassKinds) + " shape-coded classes");
    if (image_size == 0 || render_size == 0) throw ConfigError("synthetic: sizes must be positive");
    if (noise_std < 0.0) throw ConfigError("synthetic: noise_std must be non-negative");
  }

  std::string describe() const {
    std::ostringstream os;
    os << "synthetic(n=" << n_samples << ",classes=" << n_classes << ",size=" << image_size << ",render="
       << render_size << ",shape=" << shape_fraction << ",color=" << color_fraction << ",noise=" << noise_std
       << ",seed=" << seed << ")";
    return os.str();
  }
};

// Everything about a sample except its class and pixel noise.
struct SynthLatent {
  double cx = 0.5, cy = 0.5, radius = 0.25, angle = 0.0;
  double fg_hue = 0.0, fg_sat = 0.8, fg_val = 0.8;
  double bg_hue = 0.0, bg_sat = 0.1, bg_val0 = 0.3, bg_val1 = 0.5, bg_angle = 0.0;
  friend bool operator==(const SynthLatent&, const SynthLatent&) = default;
};

inline SynthLatent sample_synth_latent(Rng& rng) {
  SynthLatent z;
  z.cx = rng.uniform(0.35, 0.65);
  z.cy = rng.uniform(0.35, 0.65);
  z.radius = rng.uniform(0.2, 0.32);
  z.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  z.fg_hue = rng.uniform();
  z.fg_sat = rng.uniform(0.55, 1.0);
  z.fg_val = rng.uniform(0.6, 1.0);
  z.bg_hue = rng.uniform();
  z.bg_sat = rng.uniform(0.0, 0.3);
  z.bg_val0 = rng.uniform(0.1, 0.5);
  z.bg_val1 = rng.uniform(0.1, 0.5);
  z.bg_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return z;
}

inline ShapeKind class_shape(const SyntheticSpec& spec, int label) {
  const auto k = static_cast<std::size_t>(label);
  return k < spec.shape_classes() ? static_cast<ShapeKind>(k) : ShapeKind::Ring;
}

// Hue-coded classes pin the foreground hue to evenly spaced class hues.
inline double class_hue(const SyntheticSpec& spec, int label, double latent_hue) {
  const auto k = static_cast<std::size_t>(label);
  if (k < spec.shape_classes()) return latent_hue;
  const double base = static_cast<double>(k - spec.shape_classes()) / static_cast<double>(spec.color_classes());
  return base + 0.04 * (latent_hue - 0.5);
}

// (u, v) in object coordinates: rotated, scaled so the shape fits |u|,|v| <= 1.
inline bool shape_contains(ShapeKind s, double u, double v) {
  const double r2 = u * u + v * v;
  switch (s) {
    case ShapeKind::Disk: return r2 <= 1.0;
    case ShapeKind::Square: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case ShapeKind::Triangle: return v <= 0.7 && v >= -0.9 + 1.6 * std::abs(u) / 0.92;
    case ShapeKind::Plus: return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    case ShapeKind::Stripes:
      return std::abs(u) <= 0.9 && std::abs(v) <= 0.9 && std::fmod(v + 0.9, 0.6) < 0.3;
    case ShapeKind::Frame:
      return std::max(std::abs(u), std::abs(v)) <= 0.9 && std::max(std::abs(u), std::abs(v)) >= 0.55;
    case ShapeKind::Ring: return r2 <= 1.0 && r2 >= 0.36;
  }
  return false;
}

// Deterministic rendering at render_size, then resized to image_size. Noise
// is added only when `noise` is non-null and noise_std > 0.
inline Image render_synthetic(const SyntheticSpec& spec, int label, const SynthLatent& z, Rng* noise = nullptr) {
  const std::size_t R = spec.render_size;
  Image canvas(3, R, R);
  float fr, fg, fb;
  detail::hsv_to_rgb(static_cast<float>(std::fmod(class_hue(spec, label, z.fg_hue) + 1.0, 1.0)),
             static_cast<float>(z.fg_sat), static_cast<float>(z.fg_val), fr, fg, fb);
  float br, bgc, bb;
  const ShapeKind shape = class_shape(spec, label);
  const double ca = std::cos(z.angle), sa = std::sin(z.angle);
  const double ga = std::cos(z.bg_angle), gb = std::sin(z.bg_angle);
  for (std::size_t y = 0; y < R; ++y)
    for (std::size_t x = 0; x < R; ++x) {
      const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(R);
      const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(R);
      const double dx = (px - z.cx) / z.radius, dy = (py - z.cy) / z.radius;
      const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
      float r, g, b;
      if (shape_contains(shape, u, v)) {
        r = fr, g = fg, b = fb;
      } else {
        const double t = std::clamp(0.5 + (px - 0.5) * ga + (py - 0.5) * gb, 0.0, 1.0);
        detail::hsv_to_rgb(static_cast<float>(z.bg_hue), static_cast<float>(z.bg_sat),
                   static_cast<float>(z.bg_val0 + (z.bg_val1 - z.bg_val0) * t), br, bgc, bb);
        r = br, g = bgc, b = bb;
      }
      canvas.at(0, y, x) = r;
      canvas.at(1, y, x) = g;
      canvas.at(2, y, x) = b;
    }
  Image out = resize(canvas, spec.image_size, spec.image_size);
  if (noise && spec.noise_std > 0.0)
    for (auto& p : out.pixels) p = detail::clamp01(p + static_cast<float>(noise->normal() * spec.noise_std));
  return out;
}

// Sample i depends only on (seed, i): label i mod n_classes, latent and noise
// from a per-index stream.
inline std::pair<Image, int> synth_sample(const SyntheticSpec& spec, std::size_t index) {
  Rng rng(derive_seed(spec.seed, stream_tag::synth, index));
  const int label = static_cast<int>(index % spec.n_classes);
  const SynthLatent z = sample_synth_latent(rng);
  return {render_synthetic(spec, label, z, &rng), label};
}

inline Dataset synth_generate_indices(const SyntheticSpec& spec, const std::vector<std::size_t>& indices) {
  spec.validate();
  Dataset ds;
  ds.channels = 3;
  ds.height = ds.width = spec.image_size;
  ds.num_classes = spec.n_classes;
  ds.provenance = spec.describe();
  ds.pixels.reserve(indices.size() * ds.image_bytes());
  ds.labels.reserve(indices.size());
  for (auto i : indices) {
    auto [img, label] = synth_sample(spec, i);
    ds.push(img, label);
  }
  return ds;
}

inline Dataset synth_generate(const SyntheticSpec& spec) {
  std::vector<std::size_t> idx(spec.n_samples);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return synth_generate_indices(spec, idx);
}

inline Dataset synth_generate(SyntheticSpec spec, std::uint64_t seed) {
  spec.seed = seed;
  return synth_generate(spec);
}

// ---------------------------------------------------------------------------
// CIFAR binary: records of [label][1024 R][1024 G][1024 B].

inline constexpr std::size_t kCifarRecordBytes = 3073;

inline std::uint64_t bytes_checksum(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

inline Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecordBytes != 0) throw FormatError("cifar: truncated record", bytes.size());
  Dataset ds;
  ds.channels = 3;
  ds.height = ds.width = 32;
  ds.num_classes = 10;
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  ds.labels.reserve(n);
  ds.pixels.reserve(n * 3072);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t off = r * kCifarRecordBytes;
    if (bytes[off] > 9) throw FormatError("cifar: label " + std::to_string(bytes[off]) + " out of range", off);
    ds.labels.push_back(bytes[off]);
    ds.pixels.insert(ds.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + 1),
                     bytes.begin() + static_cast<std::ptrdiff_t>(off + kCifarRecordBytes));
  }
  std::ostringstream os;
  os << "cifar:" << std::hex << bytes_checksum(bytes);
  ds.provenance = os.str();
  return ds;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline Dataset load_cifar_binary(const std::string& path) { return parse_cifar_binary(read_file_bytes(path)); }

inline Dataset load_cifar_binary(const std::vector<std::string>& paths) {
  Dataset all;
  for (const auto& p : paths) {
    Dataset d = load_cifar_binary(p);
    if (all.labels.empty()) {
      all = std::move(d);
      continue;
    }
    all.pixels.insert(all.pixels.end(), d.pixels.begin(), d.pixels.end());
    all.labels.insert(all.labels.end(), d.labels.begin(), d.labels.end());
    all.provenance += "+" + d.provenance;
  }
  return all;
}

// ---------------------------------------------------------------------------
// Batching

// Full batches of an epoch; the permutation depends only on (seed, epoch)
// and the trailing partial batch is dropped.
inline std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size, std::uint64_t epoch,
                                                        std::uint64_t seed) {
  if (batch_size == 0) throw ParameterError("batch_iter: batch_size must be positive");
  const auto perm = seeded_permutation(n, derive_seed(seed, stream_tag::epoch, epoch));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b + batch_size <= n; b += batch_size)
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(b),
                     perm.begin() + static_cast<std::ptrdiff_t>(b + batch_size));
  return out;
}

inline std::vector<std::vector<std::size_t>> batch_iter(const Dataset& ds, std::size_t batch_size, std::uint64_t epoch,
                                                        std::uint64_t seed) {
  return batch_iter(ds.size(), batch_size, epoch, seed);
}

// Indices of the batch consumed at a global step, epochs laid end to end.
class StepBatcher {
 public:
  StepBatcher(std::size_t n, std::size_t batch_size, std::uint64_t seed) : n_(n), bs_(batch_size), seed_(seed) {
    if (batch_size == 0 || n < batch_size) throw ConfigError("batch size exceeds dataset size");
  }
  std::size_t batches_per_epoch() const { return n_ / bs_; }
  const std::vector<std::size_t>& at(std::size_t step) {
    const std::uint64_t epoch = step / batches_per_epoch();
    if (!cached_ || epoch != epoch_) {
      batches_ = batch_iter(n_, bs_, epoch, seed_);
      epoch_ = epoch;
      cached_ = true;
    }
    return batches_[step % batches_per_epoch()];
  }

 private:
  std::size_t n_, bs_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  bool cached_ = false;
  std::vector<std::vector<std::size_t>> batches_;
};

}  // namespace jea
