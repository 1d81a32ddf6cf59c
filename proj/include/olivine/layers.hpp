#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "olivine/error.hpp"
#include "olivine/ops.hpp"
#include "olivine/tensor.hpp"

namespace olivine {

enum class Mode { Train, Infer };

// A named tensor owned by a layer, with its accumulated gradient.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(T{}); }
};

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T silu(T x) {
  return x * sigmoid(x);
}

template <typename T>
T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T(1) + x * (T(1) - s));
}

template <typename T>
Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> array_of(Tensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.size())};
}

template <typename T>
Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> array_of(const Tensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.size())};
}

// Branch-on-sign sigmoid of x into s (same length): exp() only ever sees
// non-positive arguments.
template <typename In, typename Out>
void stable_sigmoid(const Eigen::ArrayBase<In>& x, Eigen::ArrayBase<Out>& s) {
  using T = typename In::Scalar;
  s = (-x.abs()).exp();
  s = (x >= T(0)).select(T(1), s) / (T(1) + s);
}

// Base class for all layers. forward() caches whatever backward() needs;
// backward() accumulates parameter gradients (when trainable) and returns the
// input gradient when asked for it.
template <typename T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  const std::string& name() const { return name_; }
  virtual std::string_view kind() const = 0;

  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad) = 0;

  // Learned weights, in checkpoint order.
  virtual std::vector<Param<T>*> params() { return {}; }
  // Non-learned state saved with the weights (BN running statistics).
  virtual std::vector<Param<T>*> buffers() { return {}; }

  bool trainable() const { return trainable_; }
  virtual void set_trainable(bool on) {
    trainable_ = on;
    for (auto* p : params()) p->trainable = on;
  }

 protected:
  void require_rank(const Tensor<T>& x, std::size_t rank) const {
    if (x.rank() != rank) {
      throw ShapeError(name_ + ": expected rank-" + std::to_string(rank) + " input, got " + shape_string(x.shape()));
    }
  }
  void require_channels(const Tensor<T>& x, std::size_t channels) const {
    if (x.rank() < 2 || x.dim(1) != channels) {
      throw ShapeError(name_ + ": expected " + std::to_string(channels) + " channels, got input " +
                       shape_string(x.shape()));
    }
  }

  std::string name_;
  bool trainable_ = true;
};

// Convolution with "same" padding, no bias. groups == channels gives a
// depthwise convolution.
template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
         std::size_t groups = 1)
      : Layer<T>(std::move(name)), in_ch_(in_ch), stride_(stride), groups_(groups),
        weight_(this->name_ + ".weight", Tensor<T>({out_ch, in_ch / groups, kernel, kernel})) {
    if (kernel % 2 == 0) throw ShapeError(this->name_ + ": kernel size must be odd");
    if (groups == 0 || in_ch % groups || out_ch % groups) throw ShapeError(this->name_ + ": bad group count");
  }

  std::string_view kind() const override { return groups_ == 1 ? "Conv" : "DepthwiseConv"; }
  std::size_t fan_in() const { return weight_.value.dim(1) * weight_.value.dim(2) * weight_.value.dim(3); }

  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    this->require_rank(x, 4);
    this->require_channels(x, in_ch_);
    geom_ = conv_geometry_same(x.dim(2), x.dim(3), weight_.value.dim(2), stride_);
    geom_.groups = groups_;
    input_ = x;
    return conv2d_nchw(x, weight_.value, geom_);
  }

  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad) override {
    if (!this->trainable_ && !need_input_grad) return {};
    auto grads = conv2d_nchw_backward(input_, weight_.value, grad_out, geom_, need_input_grad);
    if (this->trainable_) weight_.grad += grads.kernels;
    return std::move(grads.input);
  }

  std::vector<Param<T>*> params() override { return {&weight_}; }

 private:
  std::size_t in_ch_, stride_, groups_;
  Param<T> weight_;
  ConvGeometry geom_;
  Tensor<T> input_;
};

// Per-channel batch normalization over (batch, height, width). Training mode
// uses batch statistics and updates the running ones; inference mode (or a
// frozen layer in training) uses the running statistics.
template <typename T>
class BatchNorm final : public Layer<T> {
 public:
  BatchNorm(std::string name, std::size_t channels, double momentum = 0.9, double epsilon = 1e-5)
      : Layer<T>(std::move(name)), channels_(channels), momentum_(momentum), epsilon_(epsilon),
        gamma_(this->name_ + ".gamma", Tensor<T>({channels}, T(1))),
        beta_(this->name_ + ".beta", Tensor<T>({channels}, T(0))),
        running_mean_(this->name_ + ".running_mean", Tensor<T>({channels}, T(0))),
        running_var_(this->name_ + ".running_var", Tensor<T>({channels}, T(1))) {
    running_mean_.trainable = running_var_.trainable = false;
  }

  std::string_view kind() const override { return "BatchNorm"; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    if (x.rank() != 4 && x.rank() != 2) throw ShapeError(this->name_ + ": expected NCHW or NC input");
    this->require_channels(x, channels_);
    const std::size_t batch = x.dim(0);
    const std::size_t plane = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    const std::size_t n = batch * plane;
    batch_stats_ = mode == Mode::Train && this->trainable_;
    inv_std_.assign(channels_, T{});
    x_hat_ = Tensor<T>::uninitialized(x.shape());
    auto y = Tensor<T>::uninitialized(x.shape());
    using Plane = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
    using OutPlane = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
    const auto len = static_cast<Eigen::Index>(plane);
    for (std::size_t c = 0; c < channels_; ++c) {
      T mean{}, var{};
      if (batch_stats_) {
        double sum = 0.0;
        for (std::size_t b = 0; b < batch; ++b) sum += static_cast<double>(Plane(x.data() + (b * channels_ + c) * plane, len).sum());
        mean = static_cast<T>(sum / static_cast<double>(n));
        double sq = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
          sq += static_cast<double>((Plane(x.data() + (b * channels_ + c) * plane, len) - mean).square().sum());
        }
        var = static_cast<T>(sq / static_cast<double>(n));
        const double unbiased = n > 1 ? sq / static_cast<double>(n - 1) : static_cast<double>(var);
        running_mean_.value[c] = static_cast<T>(momentum_ * running_mean_.value[c] + (1.0 - momentum_) * mean);
        running_var_.value[c] = static_cast<T>(momentum_ * running_var_.value[c] + (1.0 - momentum_) * unbiased);
      } else {
        mean = running_mean_.value[c];
        var = running_var_.value[c];
      }
      const T inv = T(1) / std::sqrt(var + static_cast<T>(epsilon_));
      inv_std_[c] = inv;
      const T g = gamma_.value[c], bt = beta_.value[c];
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t off = (b * channels_ + c) * plane;
        OutPlane xh(x_hat_.data() + off, len);
        xh = (Plane(x.data() + off, len) - mean) * inv;
        OutPlane(y.data() + off, len) = xh * g + bt;
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad) override {
    if (!this->trainable_ && !need_input_grad) return {};
    grad_out.require_same_shape(x_hat_, "BatchNorm backward");
    const std::size_t batch = grad_out.dim(0);
    const std::size_t plane = grad_out.rank() == 4 ? grad_out.dim(2) * grad_out.dim(3) : 1;
    const T n = static_cast<T>(batch * plane);
    Tensor<T> grad_in = need_input_grad ? Tensor<T>::uninitialized(grad_out.shape()) : Tensor<T>();
    using Plane = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
    using OutPlane = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
    const auto len = static_cast<Eigen::Index>(plane);
    for (std::size_t c = 0; c < channels_; ++c) {
      T sum_g{}, sum_gx{};
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t off = (b * channels_ + c) * plane;
        const Plane g(grad_out.data() + off, len);
        sum_g += g.sum();
        sum_gx += (g * Plane(x_hat_.data() + off, len)).sum();
      }
      if (this->trainable_) {
        gamma_.grad[c] += sum_gx;
        beta_.grad[c] += sum_g;
      }
      if (!need_input_grad) continue;
      const T scale = gamma_.value[c] * inv_std_[c];
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t off = (b * channels_ + c) * plane;
        const Plane g(grad_out.data() + off, len);
        OutPlane gi(grad_in.data() + off, len);
        if (batch_stats_) {
          gi = scale * (g - (sum_g + Plane(x_hat_.data() + off, len) * sum_gx) / n);
        } else {
          gi = scale * g;
        }
      }
    }
    return grad_in;
  }

  std::vector<Param<T>*> params() override { return {&gamma_, &beta_}; }
  std::vector<Param<T>*> buffers() override { return {&running_mean_, &running_var_}; }

 private:
  std::size_t channels_;
  double momentum_, epsilon_;
  Param<T> gamma_, beta_, running_mean_, running_var_;
  bool batch_stats_ = false;
  std::vector<T> inv_std_;
  Tensor<T> x_hat_;
};

enum class ActivationKind { ReLU6, SiLU };

template <typename T>
class Activation final : public Layer<T> {
 public:
  Activation(std::string name, ActivationKind fn) : Layer<T>(std::move(name)), fn_(fn) {}

  std::string_view kind() const override { return fn_ == ActivationKind::ReLU6 ? "ReLU6" : "SiLU"; }

  // SiLU works in blocks so sigmoid temporaries stay in cache.
  static constexpr Eigen::Index kBlock = 4096;

  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    input_ = x;
    auto y = Tensor<T>::uninitialized(x.shape());
    const auto in = array_of(x);
    auto out = array_of(y);
    if (fn_ == ActivationKind::ReLU6) {
      out = in.max(T(0)).min(T(6));
    } else {
      Eigen::Array<T, Eigen::Dynamic, 1> s(std::min<Eigen::Index>(kBlock, in.size()));
      for (Eigen::Index i = 0; i < in.size(); i += kBlock) {
        const Eigen::Index n = std::min(kBlock, in.size() - i);
        auto sv = s.head(n);
        stable_sigmoid(in.segment(i, n), sv);
        out.segment(i, n) = in.segment(i, n) * sv;
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad) override {
    if (!need_input_grad) return {};
    grad_out.require_same_shape(input_, "activation backward");
    auto g = Tensor<T>::uninitialized(grad_out.shape());
    const auto x = array_of(input_);
    const auto go = array_of(grad_out);
    auto gi = array_of(g);
    if (fn_ == ActivationKind::ReLU6) {
      gi = (x > T(0) && x < T(6)).select(go, T(0));
    } else {
      Eigen::Array<T, Eigen::Dynamic, 1> s(std::min<Eigen::Index>(kBlock, x.size()));
      for (Eigen::Index i = 0; i < x.size(); i += kBlock) {
        const Eigen::Index n = std::min(kBlock, x.size() - i);
        auto xs = x.segment(i, n);
        auto sv = s.head(n);
        stable_sigmoid(xs, sv);
        gi.segment(i, n) = go.segment(i, n) * sv * (T(1) + xs * (T(1) - sv));
      }
    }
    return g;
  }

 private:
  ActivationKind fn_;
  Tensor<T> input_;
};

// Fully connected layer on [B x in] inputs: y = x W^T + b, W is [out x in].
template <typename T>
class Dense final : public Layer<T> {
 public:
  Dense(std::string name, std::size_t in, std::size_t out)
      : Layer<T>(std::move(name)), weight_(this->name_ + ".weight", Tensor<T>({out, in})),
        bias_(this->name_ + ".bias", Tensor<T>({out})) {}

  std::string_view kind() const override { return "Dense"; }
  std::size_t fan_in() const { return weight_.value.dim(1); }

  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    this->require_rank(x, 2);
    this->require_channels(x, weight_.value.dim(1));
    input_ = x;
    return affine(x, weight_.value, bias_.value);
  }

  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad) override {
    Tensor<T> grad_in;
    affine_backward(input_, weight_.value, grad_out, this->trainable_ ? &weight_.grad : nullptr,
                    this->trainable_ ? &bias_.grad : nullptr, need_input_grad ? &grad_in : nullptr);
    return grad_in;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }

  static Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    const auto batch = static_cast<Eigen::Index>(x.dim(0));
    const auto in = static_cast<Eigen::Index>(w.dim(1)), out = static_cast<Eigen::Index>(w.dim(0));
    Tensor<T> y({x.dim(0), w.dim(0)});
    MatrixView<T> ym(y.data(), batch, out);
    ym.noalias() = ConstMatrixView<T>(x.data(), batch, in) * ConstMatrixView<T>(w.data(), out, in).transpose();
    for (Eigen::Index r = 0; r < batch; ++r) {
      for (Eigen::Index c = 0; c < out; ++c) ym(r, c) += b[static_cast<std::size_t>(c)];
    }
    return y;
  }

  static void affine_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& g, Tensor<T>* gw,
                              Tensor<T>* gb, Tensor<T>* gx) {
    const auto batch = static_cast<Eigen::Index>(x.dim(0));
    const auto in = static_cast<Eigen::Index>(w.dim(1)), out = static_cast<Eigen::Index>(w.dim(0));
    if (g.shape() != Shape{x.dim(0), w.dim(0)}) throw ShapeError("dense backward: gradient shape mismatch");
    ConstMatrixView<T> gm(g.data(), batch, out);
    if (gw) MatrixView<T>(gw->data(), out, in).noalias() += gm.transpose() * ConstMatrixView<T>(x.data(), batch, in);
    if (gb) {
      for (Eigen::Index r = 0; r < batch; ++r) {
        for (Eigen::Index c = 0; c < out; ++c) (*gb)[static_cast<std::size_t>(c)] += gm(r, c);
      }
    }
    if (gx) {
      *gx = Tensor<T>(x.shape());
      MatrixView<T>(gx->data(), batch, in).noalias() = gm * ConstMatrixView<T>(w.data(), out, in);
    }
  }

 private:
  Param<T> weight_, bias_;
  Tensor<T> input_;
};

// Channel gating: z = sigmoid(fc2(SiLU(fc1(avgpool(x))))), y = x * z.
template <typename T>
class SqueezeExcite final : public Layer<T> {
 public:
  SqueezeExcite(std::string name, std::size_t channels, std::size_t ratio)
      : Layer<T>(std::move(name)), channels_(channels), reduced_(std::max<std::size_t>(1, channels / ratio)),
        w1_(this->name_ + ".fc1.weight", Tensor<T>({reduced_, channels})),
        b1_(this->name_ + ".fc1.bias", Tensor<T>({reduced_})),
        w2_(this->name_ + ".fc2.weight", Tensor<T>({channels, reduced_})),
        b2_(this->name_ + ".fc2.bias", Tensor<T>({channels})) {
    if (ratio == 0) throw ShapeError(this->name_ + ": ratio must be >= 1");
  }

  std::string_view kind() const override { return "SqueezeExcite"; }
  std::size_t reduced() const { return reduced_; }

  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    this->require_rank(x, 4);
    this->require_channels(x, channels_);
    input_ = x;
    squeezed_ = global_avg_pool_nchw(x);
    hidden_ = Dense<T>::affine(squeezed_, w1_.value, b1_.value);
    activated_ = hidden_;
    for (auto& v : activated_.values()) v = silu(v);
    gate_ = Dense<T>::affine(activated_, w2_.value, b2_.value);
    for (auto& v : gate_.values()) v = sigmoid(v);
    Tensor<T> y(x.shape());
    const std::size_t plane = x.dim(2) * x.dim(3);
    for (std::size_t bc = 0; bc < x.dim(0) * channels_; ++bc) {
      const T z = gate_[bc];
      const T* p = x.data() + bc * plane;
      T* q = y.data() + bc * plane;
      for (std::size_t i = 0; i < plane; ++i) q[i] = p[i] * z;
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad) override {
    if (!this->trainable_ && !need_input_grad) return {};
    grad_out.require_same_shape(input_, "squeeze-excite backward");
    const std::size_t plane = input_.dim(2) * input_.dim(3);
    const std::size_t bcs = input_.dim(0) * channels_;
    Tensor<T> d_gate(gate_.shape());
    for (std::size_t bc = 0; bc < bcs; ++bc) {
      const T* g = grad_out.data() + bc * plane;
      const T* x = input_.data() + bc * plane;
      T acc{};
      for (std::size_t i = 0; i < plane; ++i) acc += g[i] * x[i];
      const T z = gate_[bc];
      d_gate[bc] = acc * z * (T(1) - z);
    }
    Tensor<T> d_act;
    Dense<T>::affine_backward(activated_, w2_.value, d_gate, this->trainable_ ? &w2_.grad : nullptr,
                              this->trainable_ ? &b2_.grad : nullptr, &d_act);
    for (std::size_t i = 0; i < d_act.size(); ++i) d_act[i] *= silu_grad(hidden_[i]);
    Tensor<T> d_squeezed;
    Dense<T>::affine_backward(squeezed_, w1_.value, d_act, this->trainable_ ? &w1_.grad : nullptr,
                              this->trainable_ ? &b1_.grad : nullptr, need_input_grad ? &d_squeezed : nullptr);
    if (!need_input_grad) return {};
    Tensor<T> grad_in(input_.shape());
    for (std::size_t bc = 0; bc < bcs; ++bc) {
      const T z = gate_[bc];
      const T spread = d_squeezed[bc] / static_cast<T>(plane);
      const T* g = grad_out.data() + bc * plane;
      T* gi = grad_in.data() + bc * plane;
      for (std::size_t i = 0; i < plane; ++i) gi[i] = g[i] * z + spread;
    }
    return grad_in;
  }

  std::vector<Param<T>*> params() override { return {&w1_, &b1_, &w2_, &b2_}; }

 private:
  std::size_t channels_, reduced_;
  Param<T> w1_, b1_, w2_, b2_;
  Tensor<T> input_, squeezed_, hidden_, activated_, gate_;
};

template <typename T>
class GlobalAvgPool final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  std::string_view kind() const override { return "GlobalAvgPool"; }

  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    this->require_rank(x, 4);
    input_shape_ = x.shape();
    return global_avg_pool_nchw(x);
  }

  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad) override {
    if (!need_input_grad) return {};
    return global_avg_pool_nchw_backward(input_shape_, grad_out);
  }

 private:
  Shape input_shape_;
};

// Row-wise softmax on [B x K].
template <typename T>
class Softmax final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  std::string_view kind() const override { return "Softmax"; }

  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    this->require_rank(x, 2);
    output_ = softmax_rows(x);
    return output_;
  }

  // Full Jacobian-vector product: dx = p * (g - <g, p>).
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad) override {
    if (!need_input_grad) return {};
    grad_out.require_same_shape(output_, "softmax backward");
    const std::size_t rows = output_.dim(0), k = output_.dim(1);
    Tensor<T> g(output_.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{};
      for (std::size_t j = 0; j < k; ++j) dot += grad_out(r, j) * output_(r, j);
      for (std::size_t j = 0; j < k; ++j) g(r, j) = output_(r, j) * (grad_out(r, j) - dot);
    }
    return g;
  }

  static Tensor<T> softmax_rows(const Tensor<T>& x) {
    const std::size_t rows = x.dim(0), k = x.dim(1);
    Tensor<T> y(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      T mx = x(r, 0);
      for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x(r, j));
      T sum{};
      for (std::size_t j = 0; j < k; ++j) sum += (y(r, j) = std::exp(x(r, j) - mx));
      for (std::size_t j = 0; j < k; ++j) y(r, j) /= sum;
    }
    return y;
  }

 private:
  Tensor<T> output_;
};

}  // namespace olivine
