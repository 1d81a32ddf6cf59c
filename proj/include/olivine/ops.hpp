#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>

#include "olivine/error.hpp"
#include "olivine/rng.hpp"
#include "olivine/tensor.hpp"

namespace olivine {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixView = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixView = Eigen::Map<const RowMatrix<T>>;

// He/Kaiming normal initialization: zero mean, variance 2 / fan_in.
template <typename T = float>
Tensor<T> he_init(const Shape& shape, std::size_t fan_in, Rng& rng) {
  if (shape.empty()) throw ShapeError("he_init: empty shape");
  if (fan_in == 0) throw UsageError("he_init: fan_in must be >= 1");
  Tensor<T> out(shape);
  const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : out.values()) v = static_cast<T>(rng.normal() * scale);
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                     shape_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Tensor<T> out({a.dim(0), b.dim(1)});
  MatrixView<T>(out.data(), m, n).noalias() =
      ConstMatrixView<T>(a.data(), m, k) * ConstMatrixView<T>(b.data(), k, n);
  return out;
}

// Placement of a (possibly grouped, possibly asymmetrically padded) 2-D
// convolution. Input coordinates are y * stride + i - pad_top, and likewise
// for x; anything outside the input reads as zero.
struct ConvGeometry {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t groups = 1;
  std::ptrdiff_t pad_top = 0;
  std::ptrdiff_t pad_left = 0;
  std::size_t out_h = 0;
  std::size_t out_w = 0;
};

// Symmetric padding; the output size must come out integral.
inline ConvGeometry conv_geometry_exact(std::size_t h, std::size_t w, std::size_t kernel,
                                        std::size_t stride, std::size_t pad) {
  if (kernel % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(kernel));
  if (stride == 0) throw UsageError("conv2d: stride must be >= 1");
  auto out_dim = [&](std::size_t n, const char* axis) {
    const std::size_t padded = n + 2 * pad;
    if (padded < kernel || (padded - kernel) % stride != 0) {
      throw ShapeError(std::string("conv2d: non-integral output ") + axis + " for input " +
                       std::to_string(n) + ", kernel " + std::to_string(kernel) + ", stride " +
                       std::to_string(stride) + ", pad " + std::to_string(pad));
    }
    return (padded - kernel) / stride + 1;
  };
  ConvGeometry g;
  g.kernel = kernel;
  g.stride = stride;
  g.pad_top = g.pad_left = static_cast<std::ptrdiff_t>(pad);
  g.out_h = out_dim(h, "height");
  g.out_w = out_dim(w, "width");
  return g;
}

// "Same" padding: output = ceil(n / stride); any odd leftover padding goes on
// the bottom/right edge.
inline ConvGeometry conv_geometry_same(std::size_t h, std::size_t w, std::size_t kernel,
                                       std::size_t stride) {
  if (kernel % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(kernel));
  if (stride == 0) throw UsageError("conv2d: stride must be >= 1");
  ConvGeometry g;
  g.kernel = kernel;
  g.stride = stride;
  g.out_h = (h + stride - 1) / stride;
  g.out_w = (w + stride - 1) / stride;
  auto pad_before = [&](std::size_t n, std::size_t out) {
    const std::ptrdiff_t total =
        std::max<std::ptrdiff_t>(static_cast<std::ptrdiff_t>((out - 1) * stride + kernel) -
                                     static_cast<std::ptrdiff_t>(n),
                                 0);
    return total / 2;
  };
  g.pad_top = pad_before(h, g.out_h);
  g.pad_left = pad_before(w, g.out_w);
  return g;
}

namespace detail {

// Range of output indices o with 0 <= o * stride + offset < n.
inline std::pair<std::size_t, std::size_t> valid_range(std::ptrdiff_t offset, std::size_t n,
                                                       std::size_t stride, std::size_t out) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = offset >= 0 ? 0 : (-offset + s - 1) / s;
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(n) - 1 - offset);
  hi = hi < 0 ? -1 : hi / s;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out) - 1);
  if (hi < lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi + 1)};
}

inline bool is_pointwise(const ConvGeometry& g, std::size_t h, std::size_t w) {
  return g.kernel == 1 && g.stride == 1 && g.groups == 1 && g.pad_top == 0 && g.pad_left == 0 &&
         g.out_h == h && g.out_w == w;
}

inline void check_conv_shapes(const Shape& in, const Shape& kernels, const ConvGeometry& g) {
  if (in.size() != 4 || kernels.size() != 4) {
    throw ShapeError("conv2d: expected NCHW input and OIkk kernels, got " + shape_string(in) +
                     " and " + shape_string(kernels));
  }
  if (g.groups == 0 || in[1] % g.groups != 0 || kernels[0] % g.groups != 0) {
    throw ShapeError("conv2d: channels not divisible into groups");
  }
  if (kernels[1] != in[1] / g.groups) {
    throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(in[1]) +
                     " channels but kernels expect " + std::to_string(kernels[1] * g.groups));
  }
  if (kernels[2] != g.kernel || kernels[3] != g.kernel) {
    throw ShapeError("conv2d: kernel tensor " + shape_string(kernels) + " does not match size " +
                     std::to_string(g.kernel));
  }
}

}  // namespace detail

namespace detail {
template <typename T>
using Row = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstRow = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
}  // namespace detail

// Batched grouped cross-correlation: input [B x C x H x W], kernels
// [O x C/groups x k x k] -> [B x O x out_h x out_w].
template <typename T>
Tensor<T> conv2d_nchw(const Tensor<T>& input, const Tensor<T>& kernels, const ConvGeometry& g) {
  detail::check_conv_shapes(input.shape(), kernels.shape(), g);
  const std::size_t batch = input.dim(0), channels = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t out_ch = kernels.dim(0), k = g.kernel;
  const std::size_t in_per_group = channels / g.groups, out_per_group = out_ch / g.groups;
  const std::size_t in_plane = h * w, out_plane = g.out_h * g.out_w;
  const bool pointwise = detail::is_pointwise(g, h, w);
  Shape out_shape{batch, out_ch, g.out_h, g.out_w};
  Tensor<T> out = pointwise ? Tensor<T>::uninitialized(out_shape) : Tensor<T>(out_shape);

  if (pointwise) {
    ConstMatrixView<T> wm(kernels.data(), static_cast<Eigen::Index>(out_ch), static_cast<Eigen::Index>(channels));
    for (std::size_t b = 0; b < batch; ++b) {
      ConstMatrixView<T> x(input.data() + b * channels * in_plane, static_cast<Eigen::Index>(channels),
                           static_cast<Eigen::Index>(in_plane));
      MatrixView<T> y(out.data() + b * out_ch * out_plane, static_cast<Eigen::Index>(out_ch),
                      static_cast<Eigen::Index>(out_plane));
      y.noalias() = wm * x;
    }
    return out;
  }

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_ch; ++o) {
      const std::size_t group = o / out_per_group;
      T* dst = out.data() + (b * out_ch + o) * out_plane;
      for (std::size_t ci = 0; ci < in_per_group; ++ci) {
        const std::size_t c = group * in_per_group + ci;
        const T* src = input.data() + (b * channels + c) * in_plane;
        for (std::size_t i = 0; i < k; ++i) {
          const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(i) - g.pad_top;
          const auto [y0, y1] = detail::valid_range(oy, h, g.stride, g.out_h);
          for (std::size_t j = 0; j < k; ++j) {
            const T wv = kernels[((o * in_per_group + ci) * k + i) * k + j];
            const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(j) - g.pad_left;
            const auto [x0, x1] = detail::valid_range(ox, w, g.stride, g.out_w);
            for (std::size_t y = y0; y < y1; ++y) {
              const T* row = src + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y * g.stride) + oy) * w;
              T* drow = dst + y * g.out_w;
              if (g.stride == 1) {
                const T* s = row + (static_cast<std::ptrdiff_t>(x0) + ox);
                T* d = drow + x0;
                for (std::size_t x = 0; x < x1 - x0; ++x) d[x] += wv * s[x];
              } else {
                for (std::size_t x = x0; x < x1; ++x) {
                  drow[x] += wv * row[static_cast<std::ptrdiff_t>(x * g.stride) + ox];
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
struct ConvGradients {
  Tensor<T> input;
  Tensor<T> kernels;
};

// Exact gradients of conv2d_nchw. When `need_input` is false the input
// gradient is left empty.
template <typename T>
ConvGradients<T> conv2d_nchw_backward(const Tensor<T>& input, const Tensor<T>& kernels,
                                      const Tensor<T>& grad_out, const ConvGeometry& g,
                                      bool need_input = true) {
  detail::check_conv_shapes(input.shape(), kernels.shape(), g);
  const std::size_t batch = input.dim(0), channels = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t out_ch = kernels.dim(0), k = g.kernel;
  if (grad_out.shape() != Shape{batch, out_ch, g.out_h, g.out_w}) {
    throw ShapeError("conv2d backward: gradient shape " + shape_string(grad_out.shape()) +
                     " does not match forward output");
  }
  const std::size_t in_per_group = channels / g.groups, out_per_group = out_ch / g.groups;
  const std::size_t in_plane = h * w, out_plane = g.out_h * g.out_w;
  const bool pointwise = detail::is_pointwise(g, h, w);
  ConvGradients<T> grads{need_input ? (pointwise ? Tensor<T>::uninitialized(input.shape()) : Tensor<T>(input.shape()))
                                    : Tensor<T>(),
                         Tensor<T>(kernels.shape())};

  if (pointwise) {
    const auto rows = static_cast<Eigen::Index>(out_ch), cols = static_cast<Eigen::Index>(channels);
    const auto plane = static_cast<Eigen::Index>(in_plane);
    ConstMatrixView<T> wm(kernels.data(), rows, cols);
    MatrixView<T> gw(grads.kernels.data(), rows, cols);
    for (std::size_t b = 0; b < batch; ++b) {
      ConstMatrixView<T> x(input.data() + b * channels * in_plane, cols, plane);
      ConstMatrixView<T> gy(grad_out.data() + b * out_ch * out_plane, rows, plane);
      gw.noalias() += gy * x.transpose();
      if (need_input) {
        MatrixView<T> gx(grads.input.data() + b * channels * in_plane, cols, plane);
        gx.noalias() = wm.transpose() * gy;
      }
    }
    return grads;
  }

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_ch; ++o) {
      const std::size_t group = o / out_per_group;
      const T* gsrc = grad_out.data() + (b * out_ch + o) * out_plane;
      for (std::size_t ci = 0; ci < in_per_group; ++ci) {
        const std::size_t c = group * in_per_group + ci;
        const std::size_t in_off = (b * channels + c) * in_plane;
        const T* src = input.data() + in_off;
        T* gdst = need_input ? grads.input.data() + in_off : nullptr;
        for (std::size_t i = 0; i < k; ++i) {
          const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(i) - g.pad_top;
          const auto [y0, y1] = detail::valid_range(oy, h, g.stride, g.out_h);
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t widx = ((o * in_per_group + ci) * k + i) * k + j;
            const T wv = kernels[widx];
            const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(j) - g.pad_left;
            const auto [x0, x1] = detail::valid_range(ox, w, g.stride, g.out_w);
            T acc{};
            for (std::size_t y = y0; y < y1; ++y) {
              const std::size_t row_off =
                  static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y * g.stride) + oy) * w;
              const T* grow = gsrc + y * g.out_w;
              if (g.stride == 1) {
                const std::size_t base = row_off + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x0) + ox);
                const std::size_t n = x1 - x0;
                const auto len = static_cast<Eigen::Index>(n);
                const detail::ConstRow<T> gr(grow + x0, len);
                acc += (gr * detail::ConstRow<T>(src + base, len)).sum();
                if (gdst) detail::Row<T>(gdst + base, len) += wv * gr;
              } else {
                for (std::size_t x = x0; x < x1; ++x) {
                  const auto xi = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x * g.stride) + ox);
                  acc += grow[x] * src[row_off + xi];
                  if (gdst) gdst[row_off + xi] += wv * grow[x];
                }
              }
            }
            grads.kernels[widx] += acc;
          }
        }
      }
    }
  }
  return grads;
}

// Single-image convolution with symmetric padding:
// input [C x H x W], kernels [O x C x k x k] -> [O x H' x W'].
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& kernels, std::size_t stride,
                         std::size_t pad) {
  if (input.rank() != 3 || kernels.rank() != 4 || kernels.dim(2) != kernels.dim(3)) {
    throw ShapeError("conv2d_forward: expected [C x H x W] input and square [O x C x k x k] kernels");
  }
  if (kernels.dim(1) != input.dim(0)) {
    throw ShapeError("conv2d_forward: channel mismatch (" + std::to_string(input.dim(0)) + " vs " +
                     std::to_string(kernels.dim(1)) + ")");
  }
  const auto g = conv_geometry_exact(input.dim(1), input.dim(2), kernels.dim(2), stride, pad);
  auto out = conv2d_nchw(input.reshaped({1, input.dim(0), input.dim(1), input.dim(2)}), kernels, g);
  return out.reshaped({out.dim(1), out.dim(2), out.dim(3)});
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernels,
                                                const Tensor<T>& grad_out, std::size_t stride,
                                                std::size_t pad) {
  if (input.rank() != 3 || kernels.rank() != 4 || grad_out.rank() != 3 ||
      kernels.dim(2) != kernels.dim(3) || kernels.dim(1) != input.dim(0)) {
    throw ShapeError("conv2d_backward: inconsistent shapes");
  }
  const auto g = conv_geometry_exact(input.dim(1), input.dim(2), kernels.dim(2), stride, pad);
  auto grads = conv2d_nchw_backward(input.reshaped({1, input.dim(0), input.dim(1), input.dim(2)}), kernels,
                                    grad_out.reshaped({1, grad_out.dim(0), grad_out.dim(1), grad_out.dim(2)}), g);
  return {grads.input.reshaped(input.shape()), std::move(grads.kernels)};
}

// [B x C x H x W] -> [B x C]
template <typename T>
Tensor<T> global_avg_pool_nchw(const Tensor<T>& input) {
  if (input.rank() != 4) throw ShapeError("global_avg_pool: expected NCHW, got " + shape_string(input.shape()));
  const std::size_t bc = input.dim(0) * input.dim(1), plane = input.dim(2) * input.dim(3);
  Tensor<T> out({input.dim(0), input.dim(1)});
  for (std::size_t i = 0; i < bc; ++i) {
    const T* p = input.data() + i * plane;
    T sum{};
    for (std::size_t j = 0; j < plane; ++j) sum += p[j];
    out[i] = sum / static_cast<T>(plane);
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_nchw_backward(const Shape& input_shape, const Tensor<T>& grad_out) {
  if (input_shape.size() != 4 || grad_out.shape() != Shape{input_shape[0], input_shape[1]}) {
    throw ShapeError("global_avg_pool backward: shape mismatch");
  }
  const std::size_t plane = input_shape[2] * input_shape[3];
  Tensor<T> grad(input_shape);
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    const T v = grad_out[i] / static_cast<T>(plane);
    std::fill_n(grad.data() + i * plane, plane, v);
  }
  return grad;
}

// [C x H x W] -> [C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  if (input.rank() != 3) throw ShapeError("global_avg_pool: expected [C x H x W]");
  auto out = global_avg_pool_nchw(input.reshaped({1, input.dim(0), input.dim(1), input.dim(2)}));
  return out.reshaped({input.dim(0)});
}

// Index of the largest value; ties go to the lowest index.
template <typename T>
std::size_t argmax(std::span<const T> values) {
  if (values.empty()) throw ShapeError("argmax of an empty tensor");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

template <typename T>
std::size_t argmax(const Tensor<T>& v) {
  return argmax(v.values());
}

}  // namespace olivine
