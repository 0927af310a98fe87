#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "jea/errors.hpp"

namespace jea {

// CHW float image, values in [0,1].
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }

  std::span<float> plane(std::size_t c) { return std::span<float>(pixels).subspan(c * height * width, height * width); }
  std::span<const float> plane(std::size_t c) const {
    return std::span<const float>(pixels).subspan(c * height * width, height * width);
  }

  bool in_unit_range() const {
    return std::all_of(pixels.begin(), pixels.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
  }

  friend bool operator==(const Image&, const Image&) = default;
};

struct CropRect {
  std::size_t x = 0, y = 0, width = 0, height = 0;
  friend bool operator==(const CropRect&, const CropRect&) = default;
};

// Axis-aligned window copy, no resampling.
inline Image crop(const Image& img, const CropRect& r) {
  if (r.x + r.width > img.width || r.y + r.height > img.height || r.width == 0 || r.height == 0)
    throw DimensionError("crop window outside image");
  Image out(img.channels, r.height, r.width);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < r.height; ++y)
      std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>((c * img.height + r.y + y) * img.width + r.x),
                  r.width, out.pixels.begin() + static_cast<std::ptrdiff_t>((c * r.height + y) * r.width));
  return out;
}

// Bilinear resize of the window `r` of `img` to out_h x out_w, half-pixel
// centers, edge clamped. A same-size request returns the window unchanged.
inline Image resize_region(const Image& img, const CropRect& r, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw DimensionError("resize: empty output");
  if (out_h == r.height && out_w == r.width) return crop(img, r);
  struct Tap {
    std::size_t i0, i1;
    float w1;
  };
  auto taps = [](std::size_t src, std::size_t dst, std::size_t offset) {
    std::vector<Tap> t(dst);
    const double scale = static_cast<double>(src) / static_cast<double>(dst);
    for (std::size_t o = 0; o < dst; ++o) {
      double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(src - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(s));
      const std::size_t i1 = std::min(i0 + 1, src - 1);
      t[o] = {offset + i0, offset + i1, static_cast<float>(s - static_cast<double>(i0))};
    }
    return t;
  };
  const auto ty = taps(r.height, out_h, r.y);
  const auto tx = taps(r.width, out_w, r.x);
  Image out(img.channels, out_h, out_w);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto& b = tx[x];
        const float top = img.at(c, a.i0, b.i0) * (1.0f - b.w1) + img.at(c, a.i0, b.i1) * b.w1;
        const float bot = img.at(c, a.i1, b.i0) * (1.0f - b.w1) + img.at(c, a.i1, b.i1) * b.w1;
        out.at(c, y, x) = top * (1.0f - a.w1) + bot * a.w1;
      }
    }
  return out;
}

inline Image resize(const Image& img, std::size_t out_h, std::size_t out_w) {
  return resize_region(img, {0, 0, img.width, img.height}, out_h, out_w);
}

}  // namespace jea
