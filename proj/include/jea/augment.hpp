#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "jea/image.hpp"
#include "jea/rng.hpp"

namespace jea {

// The four augmentation configurations under comparison.
enum class AugmentationMode { Original, Shared, CropResize, Crop };

inline std::string_view mode_name(AugmentationMode m) {
  switch (m) {
    case AugmentationMode::Original: return "original";
    case AugmentationMode::Shared: return "shared";
    case AugmentationMode::CropResize: return "crop_resize";
    case AugmentationMode::Crop: return "crop";
  }
  return "?";
}

inline AugmentationMode parse_mode(std::string_view s) {
  for (auto m : {AugmentationMode::Original, AugmentationMode::Shared, AugmentationMode::CropResize,
                 AugmentationMode::Crop})
    if (mode_name(m) == s) return m;
  throw ConfigError("unknown augmentation mode: " + std::string(s) + " (expected original, shared, crop_resize, crop)");
}

inline bool has_photometric_stage(AugmentationMode m) {
  return m == AugmentationMode::Original || m == AugmentationMode::Shared;
}

enum class ViewKind { FirstGlobal, SecondGlobal, Local };

// ---------------------------------------------------------------------------
// Photometric parameters

struct PhotometricParams {
  bool apply_jitter = false;
  float brightness = 1.0f;  // multiplicative factors
  float contrast = 1.0f;
  float saturation = 1.0f;
  float hue = 0.0f;  // additive shift in turns
  bool apply_grayscale = false;
  std::optional<float> blur_sigma;
  bool apply_flip = false;
  bool apply_solarize = false;
  float solarize_threshold = 128.0f / 255.0f;

  bool is_identity() const {
    return !apply_jitter && !apply_grayscale && !blur_sigma && !apply_flip && !apply_solarize;
  }
  friend bool operator==(const PhotometricParams&, const PhotometricParams&) = default;
};

struct PhotometricRanges {
  double jitter_p = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double hue = 0.1;
  double grayscale_p = 0.2;
  // Per view kind: first global, second global, local.
  std::array<double, 3> blur_p{0.5, 0.5, 0.5};
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 1.0;
  double flip_p = 0.5;
  std::array<double, 3> solarize_p{0.0, 0.2, 0.0};
  double solarize_threshold = 128.0 / 255.0;

  static PhotometricRanges disabled() {
    PhotometricRanges r;
    r.jitter_p = r.grayscale_p = r.flip_p = 0.0;
    r.blur_p = {0.0, 0.0, 0.0};
    r.solarize_p = {0.0, 0.0, 0.0};
    return r;
  }

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    bool ok = prob(jitter_p) && prob(grayscale_p) && prob(flip_p) && brightness >= 0 && contrast >= 0 &&
              saturation >= 0 && hue >= 0 && hue <= 0.5 && blur_sigma_min > 0 && blur_sigma_max >= blur_sigma_min &&
              solarize_threshold >= 0 && solarize_threshold <= 1;
    for (int i = 0; i < 3; ++i) ok = ok && prob(blur_p[i]) && prob(solarize_p[i]);
    if (!ok) throw ConfigError("photometric ranges out of bounds");
  }
};

// Every field is drawn on every call (fixed stream consumption); the
// application flags decide which draws take effect.
inline PhotometricParams sample_photometric_params(Rng& rng, const PhotometricRanges& r, ViewKind kind) {
  const auto k = static_cast<std::size_t>(kind);
  PhotometricParams p;
  p.apply_jitter = rng.bernoulli(r.jitter_p);
  const auto b = static_cast<float>(rng.uniform(std::max(0.0, 1.0 - r.brightness), 1.0 + r.brightness));
  const auto c = static_cast<float>(rng.uniform(std::max(0.0, 1.0 - r.contrast), 1.0 + r.contrast));
  const auto s = static_cast<float>(rng.uniform(std::max(0.0, 1.0 - r.saturation), 1.0 + r.saturation));
  const auto h = static_cast<float>(rng.uniform(-r.hue, r.hue));
  if (p.apply_jitter) {
    p.brightness = b;
    p.contrast = c;
    p.saturation = s;
    p.hue = h;
  }
  p.apply_grayscale = rng.bernoulli(r.grayscale_p);
  const bool blur = rng.bernoulli(r.blur_p[k]);
  const auto sigma = static_cast<float>(rng.uniform(r.blur_sigma_min, r.blur_sigma_max));
  if (blur) p.blur_sigma = sigma;
  p.apply_flip = rng.bernoulli(r.flip_p);
  p.apply_solarize = rng.bernoulli(r.solarize_p[k]);
  p.solarize_threshold = static_cast<float>(r.solarize_threshold);
  return p;
}

namespace detail {

inline float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

inline float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const float d = mx - mn;
  v = mx;
  s = mx > 0.0f ? d / mx : 0.0f;
  if (d <= 0.0f) {
    h = 0.0f;
    return;
  }
  if (mx == r) h = (g - b) / d;
  else if (mx == g) h = 2.0f + (b - r) / d;
  else h = 4.0f + (r - g) / d;
  h /= 6.0f;
  if (h < 0.0f) h += 1.0f;
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  const float hh = (h - std::floor(h)) * 6.0f;
  const int i = std::min(static_cast<int>(hh), 5);
  const float f = hh - static_cast<float>(i);
  const float p = v * (1.0f - s), q = v * (1.0f - s * f), t = v * (1.0f - s * (1.0f - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

inline void gaussian_blur(Image& img, float sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0f * sigma)));
  std::vector<float> k(static_cast<std::size_t>(2 * radius + 1));
  float z = 0.0f;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5f * static_cast<float>(i * i) / (sigma * sigma));
    z += k[static_cast<std::size_t>(i + radius)];
  }
  for (auto& v : k) v /= z;
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
    return i;
  };
  const int H = static_cast<int>(img.height), W = static_cast<int>(img.width);
  std::vector<float> tmp(img.height * img.width);
  for (std::size_t c = 0; c < img.channels; ++c) {
    auto plane = img.plane(c);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        float acc = 0.0f;
        for (int i = -radius; i <= radius; ++i)
          acc += k[static_cast<std::size_t>(i + radius)] * plane[static_cast<std::size_t>(y * W + reflect(x + i, W))];
        tmp[static_cast<std::size_t>(y * W + x)] = acc;
      }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        float acc = 0.0f;
        for (int i = -radius; i <= radius; ++i)
          acc += k[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(reflect(y + i, H) * W + x)];
        plane[static_cast<std::size_t>(y * W + x)] = clamp01(acc);
      }
  }
}

}  // namespace detail

// Applies jitter (brightness, contrast, saturation, hue) -> grayscale ->
// blur -> horizontal flip -> solarize, clamping to [0,1] after each stage.
// Identity params return the input unchanged.
inline Image apply_photometric(const Image& img, const PhotometricParams& p) {
  if (p.is_identity()) return img;
  if (img.channels != 3 && (p.apply_jitter || p.apply_grayscale))
    throw DimensionError("color augmentations need a 3-channel image");
  Image out = img;
  const std::size_t n = img.height * img.width;
  if (p.apply_jitter) {
    auto R = out.plane(0), G = out.plane(1), B = out.plane(2);
    for (std::size_t i = 0; i < n; ++i) {
      R[i] = detail::clamp01(R[i] * p.brightness);
      G[i] = detail::clamp01(G[i] * p.brightness);
      B[i] = detail::clamp01(B[i] * p.brightness);
    }
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += detail::luma(R[i], G[i], B[i]);
    const auto m = static_cast<float>(mean / static_cast<double>(n));
    for (auto plane : {R, G, B})
      for (auto& v : plane) v = detail::clamp01((v - m) * p.contrast + m);
    for (std::size_t i = 0; i < n; ++i) {
      const float gray = detail::luma(R[i], G[i], B[i]);
      R[i] = detail::clamp01((R[i] - gray) * p.saturation + gray);
      G[i] = detail::clamp01((G[i] - gray) * p.saturation + gray);
      B[i] = detail::clamp01((B[i] - gray) * p.saturation + gray);
    }
    if (p.hue != 0.0f) {
      for (std::size_t i = 0; i < n; ++i) {
        float h, s, v;
        detail::rgb_to_hsv(R[i], G[i], B[i], h, s, v);
        detail::hsv_to_rgb(h + p.hue, s, v, R[i], G[i], B[i]);
        R[i] = detail::clamp01(R[i]);
        G[i] = detail::clamp01(G[i]);
        B[i] = detail::clamp01(B[i]);
      }
    }
  }
  if (p.apply_grayscale) {
    auto R = out.plane(0), G = out.plane(1), B = out.plane(2);
    for (std::size_t i = 0; i < n; ++i) R[i] = G[i] = B[i] = detail::clamp01(detail::luma(R[i], G[i], B[i]));
  }
  if (p.blur_sigma) detail::gaussian_blur(out, *p.blur_sigma);
  if (p.apply_flip) {
    for (std::size_t c = 0; c < out.channels; ++c)
      for (std::size_t y = 0; y < out.height; ++y) {
        auto row = out.plane(c).subspan(y * out.width, out.width);
        std::reverse(row.begin(), row.end());
      }
  }
  if (p.apply_solarize)
    for (auto& v : out.pixels)
      if (v >= p.solarize_threshold) v = 1.0f - v;
  return out;
}

// ---------------------------------------------------------------------------
// Geometry

struct ScaleRange {
  double lo, hi;
};

// Samples a window whose area fraction lies in `scale` and aspect ratio in
// `ratio` (log-uniform), after integer rounding. Falls back to the largest
// centered window with aspect inside `ratio` after 10 rejected draws.
inline CropRect sample_resized_crop_rect(std::size_t height, std::size_t width, Rng& rng, ScaleRange scale,
                                         ScaleRange ratio) {
  const double area = static_cast<double>(height * width);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(scale.lo, scale.hi);
    const double aspect = std::exp(rng.uniform(std::log(ratio.lo), std::log(ratio.hi)));
    const auto w = static_cast<std::size_t>(std::llround(std::sqrt(target * aspect)));
    const auto h = static_cast<std::size_t>(std::llround(std::sqrt(target / aspect)));
    if (w == 0 || h == 0 || w > width || h > height) continue;
    const double frac = static_cast<double>(w * h) / area;
    if (frac < scale.lo || frac > scale.hi) continue;
    const auto y = static_cast<std::size_t>(rng.below(height - h + 1));
    const auto x = static_cast<std::size_t>(rng.below(width - w + 1));
    return {x, y, w, h};
  }
  const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
  std::size_t w = width, h = height;
  if (in_ratio < ratio.lo) h = static_cast<std::size_t>(std::llround(static_cast<double>(w) / ratio.lo));
  else if (in_ratio > ratio.hi) w = static_cast<std::size_t>(std::llround(static_cast<double>(h) * ratio.hi));
  return {(width - w) / 2, (height - h) / 2, w, h};
}

inline Image random_resized_crop(const Image& img, Rng& rng, ScaleRange scale, ScaleRange ratio, std::size_t out_size,
                                 CropRect* rect_out = nullptr) {
  const CropRect r = sample_resized_crop_rect(img.height, img.width, rng, scale, ratio);
  if (rect_out) *rect_out = r;
  return resize_region(img, r, out_size, out_size);
}

// Window position for a crop_size x crop_size crop of an already-resized square image.
inline CropRect sample_crop_window(std::size_t resized, std::size_t crop_size, Rng& rng) {
  if (crop_size > resized)
    throw ConfigError("crop size " + std::to_string(crop_size) + " exceeds resize target " + std::to_string(resized));
  const auto y = static_cast<std::size_t>(rng.below(resized - crop_size + 1));
  const auto x = static_cast<std::size_t>(rng.below(resized - crop_size + 1));
  return {x, y, crop_size, crop_size};
}

// Resizes the whole image once to resize_to x resize_to, then copies a
// crop_size window from it with no further resampling.
inline Image resize_then_random_crop(const Image& img, Rng& rng, std::size_t resize_to, std::size_t crop_size,
                                     CropRect* rect_out = nullptr) {
  if (crop_size > resize_to)
    throw ConfigError("crop size " + std::to_string(crop_size) + " exceeds resize target " + std::to_string(resize_to));
  const Image resized = resize(img, resize_to, resize_to);
  const CropRect r = sample_crop_window(resize_to, crop_size, rng);
  if (rect_out) *rect_out = r;
  return crop(resized, r);
}

// ---------------------------------------------------------------------------
// Multicrop

struct AugmentationConfig {
  AugmentationMode mode = AugmentationMode::Original;
  ScaleRange global_scale{0.32, 1.0};
  ScaleRange local_scale{0.05, 0.32};
  ScaleRange ratio{3.0 / 4.0, 4.0 / 3.0};
  std::size_t global_size = 32;
  std::size_t local_size = 16;
  std::size_t crop_mode_resize_to = 40;
  std::size_t n_global = 2;
  std::size_t n_local = 8;
  PhotometricRanges photometric;

  void validate() const {
    auto in_unit = [](ScaleRange s) { return s.lo > 0.0 && s.hi <= 1.0 && s.lo <= s.hi; };
    if (!in_unit(global_scale) || !in_unit(local_scale)) throw ConfigError("augment: scale ranges must lie in (0,1]");
    if (!(ratio.lo > 0.0 && ratio.lo <= ratio.hi)) throw ConfigError("augment: invalid aspect ratio range");
    if (global_size == 0 || local_size == 0) throw ConfigError("augment: view sizes must be positive");
    if (n_global != 2) throw ConfigError("augment: exactly two global views are supported");
    if (mode == AugmentationMode::Crop && (global_size > crop_mode_resize_to || local_size > crop_mode_resize_to))
      throw ConfigError("augment: crop mode view size exceeds crop_mode_resize_to");
    photometric.validate();
  }
};

struct ViewProvenance {
  ViewKind kind = ViewKind::FirstGlobal;
  CropRect rect;  // in source pixels, or in the resized image for Crop mode
  PhotometricParams photometric;
};

struct ViewSet {
  std::vector<Image> global_views;
  std::vector<Image> local_views;
  std::vector<ViewProvenance> provenance;  // globals first, then locals
};

// Both streams belong to one sample. Crops draw from `geometric`; photometric
// draws from `photometric`, so Original and Shared share crop rectangles.
inline ViewSet generate_views(const Image& sample, const AugmentationConfig& cfg, Rng& geometric, Rng& photometric) {
  ViewSet vs;
  const std::size_t total = cfg.n_global + cfg.n_local;
  vs.provenance.resize(total);
  auto kind_of = [&](std::size_t v) {
    if (v >= cfg.n_global) return ViewKind::Local;
    return v == 0 ? ViewKind::FirstGlobal : ViewKind::SecondGlobal;
  };

  if (cfg.mode == AugmentationMode::Crop) {
    const Image resized = resize(sample, cfg.crop_mode_resize_to, cfg.crop_mode_resize_to);
    for (std::size_t v = 0; v < total; ++v) {
      const std::size_t size = v < cfg.n_global ? cfg.global_size : cfg.local_size;
      auto& pv = vs.provenance[v];
      pv.kind = kind_of(v);
      pv.rect = sample_crop_window(cfg.crop_mode_resize_to, size, geometric);
      (v < cfg.n_global ? vs.global_views : vs.local_views).push_back(crop(resized, pv.rect));
    }
    return vs;
  }

  std::optional<PhotometricParams> shared;
  if (cfg.mode == AugmentationMode::Shared)
    shared = sample_photometric_params(photometric, cfg.photometric, ViewKind::SecondGlobal);
  for (std::size_t v = 0; v < total; ++v) {
    const bool global = v < cfg.n_global;
    auto& pv = vs.provenance[v];
    pv.kind = kind_of(v);
    Image view = random_resized_crop(sample, geometric, global ? cfg.global_scale : cfg.local_scale, cfg.ratio,
                                     global ? cfg.global_size : cfg.local_size, &pv.rect);
    if (cfg.mode == AugmentationMode::Original) pv.photometric = sample_photometric_params(photometric, cfg.photometric, pv.kind);
    else if (shared) pv.photometric = *shared;
    (global ? vs.global_views : vs.local_views).push_back(apply_photometric(view, pv.photometric));
  }
  return vs;
}

// Text record per view: sample,view,kind,x,y,w,h,jitter,b,c,s,hue,gray,blur_sigma,flip,solarize,threshold
inline void write_provenance(std::ostream& os, std::size_t sample_id, const ViewSet& vs) {
  const auto flags = os.flags();
  os << std::setprecision(9);
  for (std::size_t v = 0; v < vs.provenance.size(); ++v) {
    const auto& p = vs.provenance[v];
    const auto& ph = p.photometric;
    os << sample_id << ',' << v << ','
       << (p.kind == ViewKind::Local ? "local" : (p.kind == ViewKind::FirstGlobal ? "global1" : "global2")) << ','
       << p.rect.x << ',' << p.rect.y << ',' << p.rect.width << ',' << p.rect.height << ',' << ph.apply_jitter << ','
       << ph.brightness << ',' << ph.contrast << ',' << ph.saturation << ',' << ph.hue << ',' << ph.apply_grayscale
       << ',' << (ph.blur_sigma ? *ph.blur_sigma : 0.0f) << ',' << ph.apply_flip << ',' << ph.apply_solarize << ','
       << ph.solarize_threshold << '\n';
  }
  os.flags(flags);
}

// ---------------------------------------------------------------------------
// Block masking

struct MaskPlan {
  std::vector<std::size_t> indices;  // sorted, unique
  double ratio = 0.0;
  std::size_t grid_h = 0, grid_w = 0;

  std::size_t num_tokens() const { return grid_h * grid_w; }
  bool empty() const { return indices.empty(); }
};

inline std::size_t mask_target_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
}

// Adds random rectangular blocks (area >= 4 tokens where possible, aspect
// log-uniform in [0.3, 1/0.3]) until the target count is reached, then drops
// surplus cells of the last block at random.
inline MaskPlan sample_mask_plan(Rng& rng, double ratio, std::size_t grid_h, std::size_t grid_w) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ParameterError("mask ratio must be in [0,1]");
  MaskPlan plan;
  plan.ratio = ratio;
  plan.grid_h = grid_h;
  plan.grid_w = grid_w;
  const std::size_t n = grid_h * grid_w;
  const std::size_t target = mask_target_count(ratio, n);
  if (target == 0) return plan;
  std::vector<char> masked(n, 0);
  std::size_t count = 0;
  const double min_block = std::min<double>(4.0, static_cast<double>(target));
  int attempts = 0;
  while (count < target) {
    if (++attempts > 1000) {
      // Pathological grids: fill remaining cells uniformly.
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < n; ++i)
        if (!masked[i]) free.push_back(i);
      rng.shuffle(free.begin(), free.end());
      for (std::size_t i = 0; count < target; ++i, ++count) masked[free[i]] = 1;
      break;
    }
    const double area = rng.uniform(min_block, std::max(min_block, static_cast<double>(target - count)));
    const double aspect = std::exp(rng.uniform(std::log(0.3), std::log(1.0 / 0.3)));
    const auto h = static_cast<std::size_t>(std::llround(std::sqrt(area * aspect)));
    const auto w = static_cast<std::size_t>(std::llround(std::sqrt(area / aspect)));
    if (h == 0 || w == 0 || h > grid_h || w > grid_w) continue;
    const auto top = static_cast<std::size_t>(rng.below(grid_h - h + 1));
    const auto left = static_cast<std::size_t>(rng.below(grid_w - w + 1));
    std::vector<std::size_t> added;
    for (std::size_t y = top; y < top + h; ++y)
      for (std::size_t x = left; x < left + w; ++x)
        if (!masked[y * grid_w + x]) {
          masked[y * grid_w + x] = 1;
          added.push_back(y * grid_w + x);
        }
    count += added.size();
    if (count > target) {
      rng.shuffle(added.begin(), added.end());
      for (std::size_t i = 0; i < count - target; ++i) masked[added[i]] = 0;
      count = target;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (masked[i]) plan.indices.push_back(i);
  return plan;
}

}  // namespace jea
