#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "olivine/error.hpp"

namespace olivine {

// 8-bit raster, row-major with interleaved channels (HWC). channels is 1 or 3.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {
    validate();
  }
  Image(std::size_t w, std::size_t h, std::size_t c, std::vector<std::uint8_t> px)
      : width(w), height(h), channels(c), pixels(std::move(px)) {
    validate();
  }

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }

  void validate() const {
    if (width == 0 || height == 0) throw DataError("image dimensions must be positive");
    if (channels != 1 && channels != 3) {
      throw DataError("image must have 1 or 3 channels, got " + std::to_string(channels));
    }
    if (pixels.size() != width * height * channels) throw DataError("image pixel buffer size mismatch");
  }

  bool operator==(const Image&) const = default;
};

// 16-bit depth raster in millimetres; 0 means no reading.
struct DepthMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint16_t> depths;

  DepthMap() = default;
  DepthMap(std::size_t w, std::size_t h, std::uint16_t fill = 0) : width(w), height(h), depths(w * h, fill) {}
  DepthMap(std::size_t w, std::size_t h, std::vector<std::uint16_t> d) : width(w), height(h), depths(std::move(d)) {
    if (depths.size() != width * height) throw DataError("depth buffer size mismatch");
  }

  std::uint16_t at(std::size_t x, std::size_t y) const { return depths[y * width + x]; }

  bool operator==(const DepthMap&) const = default;
};

// gray = round(0.299 R + 0.587 G + 0.114 B); single-channel input is returned as is.
inline Image to_gray(const Image& img) {
  if (img.channels == 1) return img;
  Image out(img.width, img.height, 1);
  for (std::size_t i = 0; i < img.width * img.height; ++i) {
    const double v = 0.299 * img.pixels[3 * i] + 0.587 * img.pixels[3 * i + 1] + 0.114 * img.pixels[3 * i + 2];
    out.pixels[i] = static_cast<std::uint8_t>(std::min(255.0, std::floor(v + 0.5)));
  }
  return out;
}

// Single channel of an RGB image as a grayscale image.
inline Image extract_channel(const Image& img, std::size_t channel) {
  if (channel >= img.channels) throw UsageError("channel index out of range");
  Image out(img.width, img.height, 1);
  for (std::size_t i = 0; i < img.width * img.height; ++i) out.pixels[i] = img.pixels[i * img.channels + channel];
  return out;
}

}  // namespace olivine
