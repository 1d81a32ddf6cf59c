#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "olivine/error.hpp"
#include "olivine/image.hpp"
#include "olivine/rng.hpp"

namespace olivine {

struct AugmentConfig {
  double rotation_max_deg = 30.0;
  double p_flip_h = 0.5;
  double p_flip_v = 0.0;
  int brightness_max_delta = 40;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(rotation_max_deg >= 0.0) || !std::isfinite(rotation_max_deg)) {
      throw UsageError("aug.rotation_max_deg must be a finite value >= 0");
    }
    for (double p : {p_flip_h, p_flip_v}) {
      if (!(p >= 0.0 && p <= 1.0)) throw UsageError("augmentation probabilities must lie in [0, 1]");
    }
    if (brightness_max_delta < 0 || brightness_max_delta > 255) {
      throw UsageError("aug.brightness_max_delta must lie in 0..255");
    }
  }

  static AugmentConfig identity() { return {0.0, 0.0, 0.0, 0, 0}; }
};

enum class FlipAxis { Horizontal, Vertical };

// Per-channel mean, rounded; used as the fill for uncovered rotation pixels.
inline std::array<std::uint8_t, 3> channel_means(const Image& img) {
  std::array<std::uint64_t, 3> sums{};
  for (std::size_t i = 0; i < img.width * img.height; ++i) {
    for (std::size_t c = 0; c < img.channels; ++c) sums[c] += img.pixels[i * img.channels + c];
  }
  std::array<std::uint8_t, 3> means{};
  const auto n = img.width * img.height;
  for (std::size_t c = 0; c < img.channels; ++c) means[c] = static_cast<std::uint8_t>((sums[c] + n / 2) / n);
  return means;
}

// Rotation by angle_deg (counter-clockwise as displayed) about
// ((w-1)/2, (h-1)/2), by inverse mapping with bilinear sampling. Multiples of
// 90 degrees use exact sines so they permute pixels exactly.
inline Image rotate(const Image& img, double angle_deg) {
  img.validate();
  if (!std::isfinite(angle_deg)) throw UsageError("rotate: angle must be finite");
  double c = 0.0, s = 0.0;
  const double quarter = angle_deg / 90.0;
  if (quarter == std::floor(quarter)) {
    const auto q = static_cast<long long>(std::fmod(quarter, 4.0) + 4.0) % 4;
    constexpr std::array<double, 4> cosines{1.0, 0.0, -1.0, 0.0};
    constexpr std::array<double, 4> sines{0.0, 1.0, 0.0, -1.0};
    c = cosines[static_cast<std::size_t>(q)];
    s = sines[static_cast<std::size_t>(q)];
  } else {
    const double rad = angle_deg * std::numbers::pi / 180.0;
    c = std::cos(rad);
    s = std::sin(rad);
  }
  const auto fill = channel_means(img);
  const double cx = (static_cast<double>(img.width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(img.height) - 1.0) / 2.0;
  const double max_x = static_cast<double>(img.width - 1), max_y = static_cast<double>(img.height - 1);
  constexpr double snap = 1e-9;
  Image out(img.width, img.height, img.channels);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      // Image y grows downward, so a visually counter-clockwise turn samples
      // the source at R(+angle) applied in (x, -y) coordinates.
      double sx = cx + c * dx - s * dy;
      double sy = cy + s * dx + c * dy;
      if (sx < -snap || sy < -snap || sx > max_x + snap || sy > max_y + snap) {
        for (std::size_t ch = 0; ch < img.channels; ++ch) out.at(x, y, ch) = fill[ch];
        continue;
      }
      sx = std::clamp(sx, 0.0, max_x);
      sy = std::clamp(sy, 0.0, max_y);
      auto x0 = static_cast<std::size_t>(std::floor(sx)), y0 = static_cast<std::size_t>(std::floor(sy));
      double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      if (fx > 1.0 - snap) { ++x0; fx = 0.0; }
      if (fy > 1.0 - snap) { ++y0; fy = 0.0; }
      if (fx < snap) fx = 0.0;
      if (fy < snap) fy = 0.0;
      const std::size_t x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
      for (std::size_t ch = 0; ch < img.channels; ++ch) {
        const double top = (1.0 - fx) * img.at(x0, y0, ch) + fx * img.at(x1, y0, ch);
        const double bottom = (1.0 - fx) * img.at(x0, y1, ch) + fx * img.at(x1, y1, ch);
        const double v = (1.0 - fy) * top + fy * bottom;
        out.at(x, y, ch) = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
      }
    }
  }
  return out;
}

inline Image flip(const Image& img, FlipAxis axis) {
  img.validate();
  Image out(img.width, img.height, img.channels);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const std::size_t sx = axis == FlipAxis::Horizontal ? img.width - 1 - x : x;
      const std::size_t sy = axis == FlipAxis::Vertical ? img.height - 1 - y : y;
      for (std::size_t c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(sx, sy, c);
    }
  }
  return out;
}

// v -> clamp(v + delta, 0, 255). Not invertible where clamping occurred.
inline Image adjust_brightness(const Image& img, int delta) {
  if (delta < -255 || delta > 255) throw UsageError("adjust_brightness: |delta| must be <= 255");
  Image out = img;
  for (auto& v : out.pixels) v = static_cast<std::uint8_t>(std::clamp(static_cast<int>(v) + delta, 0, 255));
  return out;
}

// The random choices behind one augment_sample call.
struct AugmentDraws {
  double angle_deg = 0.0;
  bool flip_h = false;
  bool flip_v = false;
  int brightness_delta = 0;
};

// Draws angle, horizontal flip, vertical flip and brightness delta, in that
// order and always four draws, then applies rotate -> flips -> brightness.
inline Image augment_sample(const Image& img, const AugmentConfig& cfg, Rng& rng, AugmentDraws* log = nullptr) {
  cfg.validate();
  AugmentDraws d;
  d.angle_deg = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg);
  d.flip_h = rng.bernoulli(cfg.p_flip_h);
  d.flip_v = rng.bernoulli(cfg.p_flip_v);
  d.brightness_delta = static_cast<int>(rng.uniform_int(-cfg.brightness_max_delta, cfg.brightness_max_delta));
  if (log) *log = d;

  Image out = d.angle_deg == 0.0 ? img : rotate(img, d.angle_deg);
  if (d.flip_h) out = flip(out, FlipAxis::Horizontal);
  if (d.flip_v) out = flip(out, FlipAxis::Vertical);
  if (d.brightness_delta != 0) out = adjust_brightness(out, d.brightness_delta);
  return out;
}

}  // namespace olivine
