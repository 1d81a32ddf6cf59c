#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "olivine/error.hpp"
#include "olivine/image.hpp"
#include "olivine/tensor.hpp"

namespace olivine {

// Per-pixel foreground flag; true = foreground.
struct Mask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(std::size_t w, std::size_t h, bool fill = false) : width(w), height(h), bits(w * h, fill ? 1 : 0) {}

  bool at(std::size_t x, std::size_t y) const { return bits[y * width + x] != 0; }
  void set(std::size_t x, std::size_t y, bool v) { bits[y * width + x] = v ? 1 : 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }

  bool operator==(const Mask&) const = default;
};

// Inclusive pixel bounds.
struct BBox {
  std::size_t x0 = 0;
  std::size_t y0 = 0;
  std::size_t x1 = 0;
  std::size_t y1 = 0;

  std::size_t width() const { return x1 - x0 + 1; }
  std::size_t height() const { return y1 - y0 + 1; }
  bool operator==(const BBox&) const = default;
};

// 256-bin gray-level histogram with the class statistics used by Otsu's
// criterion. Class 0 holds levels <= t, class 1 levels > t.
struct Histogram {
  std::array<std::uint64_t, 256> counts{};
  std::uint64_t total = 0;

  static Histogram of(const Image& gray) {
    if (gray.channels != 1) throw UsageError("histogram requires a single-channel image");
    Histogram h;
    for (std::uint8_t v : gray.pixels) ++h.counts[v];
    h.total = gray.pixels.size();
    return h;
  }

  struct Split {
    std::uint64_t n0 = 0, n1 = 0;  // pixel counts
    std::uint64_t s0 = 0, s1 = 0;  // intensity sums
  };

  Split split_at(int t) const {
    Split s;
    for (int v = 0; v < 256; ++v) {
      const auto c = counts[static_cast<std::size_t>(v)];
      if (v <= t) {
        s.n0 += c;
        s.s0 += c * static_cast<std::uint64_t>(v);
      } else {
        s.n1 += c;
        s.s1 += c * static_cast<std::uint64_t>(v);
      }
    }
    return s;
  }

  double omega0(int t) const { return static_cast<double>(split_at(t).n0) / static_cast<double>(total); }
  double omega1(int t) const { return static_cast<double>(split_at(t).n1) / static_cast<double>(total); }
  double mu0(int t) const {
    const auto s = split_at(t);
    return s.n0 ? static_cast<double>(s.s0) / static_cast<double>(s.n0) : 0.0;
  }
  double mu1(int t) const {
    const auto s = split_at(t);
    return s.n1 ? static_cast<double>(s.s1) / static_cast<double>(s.n1) : 0.0;
  }

  // sigma_b^2 = w0 * w1 * (mu0 - mu1)^2; zero when either class is empty.
  static double between_class_variance(const Split& s, std::uint64_t total) {
    if (s.n0 == 0 || s.n1 == 0) return 0.0;
    const double n = static_cast<double>(total);
    const double w0 = static_cast<double>(s.n0) / n;
    const double w1 = static_cast<double>(s.n1) / n;
    const double m0 = static_cast<double>(s.s0) / static_cast<double>(s.n0);
    const double m1 = static_cast<double>(s.s1) / static_cast<double>(s.n1);
    return w0 * w1 * (m0 - m1) * (m0 - m1);
  }

  double between_class_variance(int t) const { return between_class_variance(split_at(t), total); }
};

inline Image resize_bilinear(const Image& img, std::size_t out_w, std::size_t out_h) {
  img.validate();
  if (out_w == 0 || out_h == 0) throw UsageError("resize: output size must be >= 1");
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t d = 0; d < out; ++d) {
      double s = (static_cast<double>(d) + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(s));
      t[d] = {i0, std::min(i0 + 1, in - 1), s - static_cast<double>(i0)};
    }
    return t;
  };
  const auto tx = taps(img.width, out_w);
  const auto ty = taps(img.height, out_h);
  Image out(out_w, out_h, img.channels);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto& vy = ty[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& vx = tx[x];
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = (1.0 - vx.f) * img.at(vx.i0, vy.i0, c) + vx.f * img.at(vx.i1, vy.i0, c);
        const double bottom = (1.0 - vx.f) * img.at(vx.i0, vy.i1, c) + vx.f * img.at(vx.i1, vy.i1, c);
        const double v = (1.0 - vy.f) * top + vy.f * bottom;
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
      }
    }
  }
  return out;
}

namespace detail {

// Mirror index into [0, n) without repeating the edge sample (…2 1 | 0 1 2 … n-1 | n-2 …).
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<std::ptrdiff_t>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

}  // namespace detail

// Normalized 1-D Gaussian taps for offsets -r..r, r = ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw UsageError("gaussian_blur: sigma must be > 0");
  const auto r = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (std::ptrdiff_t i = -r; i <= r; ++i) {
    const double v = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(i + r)] = v;
    sum += v;
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable Gaussian blur with reflected borders, rounded once at the end.
inline Image gaussian_blur(const Image& img, double sigma) {
  img.validate();
  const auto kernel = gaussian_kernel(sigma);
  const auto r = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  const std::size_t w = img.width, h = img.height, ch = img.channels;
  std::vector<double> tmp(w * h * ch);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t i = -r; i <= r; ++i) {
          const auto sx = detail::reflect_index(static_cast<std::ptrdiff_t>(x) + i, w);
          acc += kernel[static_cast<std::size_t>(i + r)] * img.at(sx, y, c);
        }
        tmp[(y * w + x) * ch + c] = acc;
      }
    }
  }
  Image out(w, h, ch);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t i = -r; i <= r; ++i) {
          const auto sy = detail::reflect_index(static_cast<std::ptrdiff_t>(y) + i, h);
          acc += kernel[static_cast<std::size_t>(i + r)] * tmp[(sy * w + x) * ch + c];
        }
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::floor(acc + 0.5), 0.0, 255.0));
      }
    }
  }
  return out;
}

// Threshold t maximizing the between-class variance (class 0 = pixels <= t),
// smallest t on ties. Throws when the image has a single gray level.
inline int otsu_threshold(const Image& gray) {
  const auto hist = Histogram::of(gray);
  Histogram::Split s;
  s.n1 = hist.total;
  for (int v = 0; v < 256; ++v) s.s1 += hist.counts[static_cast<std::size_t>(v)] * static_cast<std::uint64_t>(v);
  int best_t = 0;
  double best = -1.0;
  for (int t = 0; t < 256; ++t) {
    const auto c = hist.counts[static_cast<std::size_t>(t)];
    s.n0 += c;
    s.n1 -= c;
    s.s0 += c * static_cast<std::uint64_t>(t);
    s.s1 -= c * static_cast<std::uint64_t>(t);
    const double v = Histogram::between_class_variance(s, hist.total);
    if (v > best) {
      best = v;
      best_t = t;
    }
  }
  if (best <= 0.0) throw DataError("otsu: degenerate histogram (single gray level)");
  return best_t;
}

// Binarize at t and pick as foreground the class touching the image border
// less often; ties go to the > t class.
inline Mask foreground_mask(const Image& gray, int t) {
  if (gray.channels != 1) throw UsageError("foreground_mask requires a single-channel image");
  if (t < 0 || t > 255) throw UsageError("foreground_mask: threshold out of range");
  const std::size_t w = gray.width, h = gray.height;
  std::size_t border_high = 0, border_low = 0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (x != 0 && y != 0 && x != w - 1 && y != h - 1) continue;
      (gray.at(x, y) > t ? border_high : border_low)++;
    }
  }
  const bool high_is_foreground = border_high <= border_low;
  Mask m(w, h);
  for (std::size_t i = 0; i < w * h; ++i) {
    const bool high = gray.pixels[i] > t;
    m.bits[i] = (high == high_is_foreground) ? 1 : 0;
  }
  return m;
}

// Bounding box of the largest 4-connected component; ties go to the
// component reached first in row-major order.
inline BBox largest_component_bbox(const Mask& mask) {
  const std::size_t w = mask.width, h = mask.height;
  std::vector<std::uint8_t> seen(w * h, 0);
  std::vector<std::size_t> stack;
  std::size_t best_size = 0;
  BBox best;
  for (std::size_t start = 0; start < w * h; ++start) {
    if (!mask.bits[start] || seen[start]) continue;
    BBox box{start % w, start / w, start % w, start / w};
    std::size_t size = 0;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++size;
      const std::size_t x = p % w, y = p / w;
      box.x0 = std::min(box.x0, x);
      box.x1 = std::max(box.x1, x);
      box.y0 = std::min(box.y0, y);
      box.y1 = std::max(box.y1, y);
      auto visit = [&](std::size_t q) {
        if (mask.bits[q] && !seen[q]) {
          seen[q] = 1;
          stack.push_back(q);
        }
      };
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
    }
    if (size > best_size) {
      best_size = size;
      best = box;
    }
  }
  if (best_size == 0) throw DataError("largest_component_bbox: no foreground");
  return best;
}

// Foreground where near_mm <= depth <= far_mm and the reading is present.
inline Mask depth_foreground_mask(const DepthMap& depth, std::uint16_t near_mm, std::uint16_t far_mm) {
  if (near_mm >= far_mm) throw UsageError("depth_foreground_mask: near must be < far");
  Mask m(depth.width, depth.height);
  for (std::size_t i = 0; i < depth.depths.size(); ++i) {
    const auto d = depth.depths[i];
    m.bits[i] = (d != 0 && d >= near_mm && d <= far_mm) ? 1 : 0;
  }
  return m;
}

inline Mask combine_masks(const Mask& a, const Mask& b) {
  if (a.width != b.width || a.height != b.height) throw ShapeError("combine_masks: dimension mismatch");
  Mask m(a.width, a.height);
  for (std::size_t i = 0; i < a.bits.size(); ++i) m.bits[i] = (a.bits[i] && b.bits[i]) ? 1 : 0;
  return m;
}

// Zero the background, crop to the box grown by `margin` of its size on each
// side (clamped), and resize to out_size x out_size.
inline Image segment_and_crop(const Image& img, const Mask& mask, const BBox& box, std::size_t out_size,
                              double margin = 0.05) {
  img.validate();
  if (mask.width != img.width || mask.height != img.height) throw ShapeError("segment_and_crop: mask size mismatch");
  if (box.x0 > box.x1 || box.y0 > box.y1 || box.x1 >= img.width || box.y1 >= img.height) {
    throw ShapeError("segment_and_crop: box outside image");
  }
  const auto mx = static_cast<std::size_t>(std::lround(margin * static_cast<double>(box.width())));
  const auto my = static_cast<std::size_t>(std::lround(margin * static_cast<double>(box.height())));
  const std::size_t x0 = box.x0 >= mx ? box.x0 - mx : 0;
  const std::size_t y0 = box.y0 >= my ? box.y0 - my : 0;
  const std::size_t x1 = std::min(img.width - 1, box.x1 + mx);
  const std::size_t y1 = std::min(img.height - 1, box.y1 + my);
  Image crop(x1 - x0 + 1, y1 - y0 + 1, img.channels);
  for (std::size_t y = y0; y <= y1; ++y) {
    for (std::size_t x = x0; x <= x1; ++x) {
      const bool keep = mask.at(x, y);
      for (std::size_t c = 0; c < img.channels; ++c) crop.at(x - x0, y - y0, c) = keep ? img.at(x, y, c) : 0;
    }
  }
  return resize_bilinear(crop, out_size, out_size);
}

// Writes (p / 255 - 0.5) / 0.5 in CHW order into dst (C*H*W values).
template <typename T>
void normalize_into(const Image& img, T* dst) {
  const std::size_t plane = img.width * img.height;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < img.channels; ++c) {
      const double v = static_cast<double>(img.pixels[i * img.channels + c]) / 255.0;
      dst[c * plane + i] = static_cast<T>((v - 0.5) / 0.5);
    }
  }
}

// HWC 8-bit -> CHW tensor in [-1, 1].
template <typename T = float>
Tensor<T> normalize_to_tensor(const Image& img) {
  img.validate();
  Tensor<T> out({img.channels, img.height, img.width});
  normalize_into(img, out.data());
  return out;
}

// Inverse of normalize_to_tensor up to rounding.
template <typename T>
Image tensor_to_image(const Tensor<T>& t) {
  if (t.rank() != 3) throw ShapeError("tensor_to_image: expected [C x H x W]");
  const std::size_t ch = t.dim(0), h = t.dim(1), w = t.dim(2), plane = h * w;
  Image img(w, h, ch);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < ch; ++c) {
      const double v = (static_cast<double>(t[c * plane + i]) * 0.5 + 0.5) * 255.0;
      img.pixels[i * ch + c] = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
    }
  }
  return img;
}

enum class OtsuSource { Gray, Red, Green, Blue };

struct PreprocessOptions {
  double sigma = 1.0;
  std::size_t out_size = 224;
  double crop_margin = 0.05;
  OtsuSource otsu_source = OtsuSource::Gray;
  bool use_depth = false;
  std::uint16_t depth_near_mm = 1;
  std::uint16_t depth_far_mm = 65535;
};

struct PreprocessResult {
  Image image;
  bool segmented = false;
  int threshold = -1;
  BBox box;
};

// Full chain: blur -> Otsu -> foreground selection -> (depth AND) -> largest
// component -> mask + crop -> resize. A degenerate histogram, or a mask with
// no foreground, falls back to blur + resize with segmented = false.
inline PreprocessResult preprocess_image(const Image& img, const PreprocessOptions& opt,
                                         const DepthMap* depth = nullptr) {
  PreprocessResult result;
  const Image blurred = gaussian_blur(img, opt.sigma);
  Image source;
  switch (opt.otsu_source) {
    case OtsuSource::Gray: source = to_gray(blurred); break;
    case OtsuSource::Red: source = extract_channel(blurred, 0); break;
    case OtsuSource::Green: source = extract_channel(blurred, blurred.channels == 3 ? 1 : 0); break;
    case OtsuSource::Blue: source = extract_channel(blurred, blurred.channels == 3 ? 2 : 0); break;
  }
  int t = 0;
  try {
    t = otsu_threshold(source);
  } catch (const DataError&) {
    result.image = resize_bilinear(blurred, opt.out_size, opt.out_size);
    return result;
  }
  Mask mask = foreground_mask(source, t);
  if (opt.use_depth) {
    if (!depth) throw UsageError("preprocess: depth masking requested but no depth map supplied");
    if (depth->width != img.width || depth->height != img.height) {
      throw DataError("preprocess: depth map size does not match image");
    }
    mask = combine_masks(mask, depth_foreground_mask(*depth, opt.depth_near_mm, opt.depth_far_mm));
  }
  if (mask.count() == 0) {
    result.image = resize_bilinear(blurred, opt.out_size, opt.out_size);
    return result;
  }
  result.box = largest_component_bbox(mask);
  result.image = segment_and_crop(blurred, mask, result.box, opt.out_size, opt.crop_margin);
  result.segmented = true;
  result.threshold = t;
  return result;
}

}  // namespace olivine
