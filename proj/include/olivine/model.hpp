#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "olivine/error.hpp"
#include "olivine/layers.hpp"
#include "olivine/rng.hpp"
#include "olivine/tensor.hpp"

namespace olivine {

enum class LayerKind { Conv, DepthwiseConv, BatchNorm, Activation, SqueezeExcite, GlobalAvgPool, Dense, Softmax };

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  std::string name;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  ActivationKind activation = ActivationKind::ReLU6;
  std::size_t se_ratio = 4;
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;
  bool trainable = true;
};

struct BlockSpec {
  std::string name;
  std::vector<LayerSpec> layers;
  bool residual = false;
};

struct ModelSpec {
  std::string name;
  std::vector<BlockSpec> blocks;
  std::size_t num_classes = 0;
  std::size_t in_channels = 3;
  std::size_t input_size = 224;

  // Checks channel chaining, odd kernels, residual shape equality, and that
  // the network ends in Dense(num_classes) -> Softmax.
  void validate() const {
    std::size_t channels = in_channels;
    bool pooled = false;
    const LayerSpec* last = nullptr;
    const LayerSpec* before_last = nullptr;
    for (const auto& block : blocks) {
      const std::size_t block_in = channels;
      bool strided = false;
      for (const auto& l : block.layers) {
        const std::string where = block.name + "." + l.name;
        switch (l.kind) {
          case LayerKind::Conv:
          case LayerKind::DepthwiseConv:
            if (pooled) throw ShapeError(where + ": convolution after pooling");
            if (l.kernel % 2 == 0) throw ShapeError(where + ": kernel size must be odd");
            if (l.in_channels != channels) throw ShapeError(where + ": expects " + std::to_string(l.in_channels) + " channels, receives " + std::to_string(channels));
            if (l.kind == LayerKind::DepthwiseConv && l.out_channels != l.in_channels) throw ShapeError(where + ": depthwise conv must keep channel count");
            if (l.stride != 1) strided = true;
            channels = l.out_channels;
            break;
          case LayerKind::BatchNorm:
          case LayerKind::SqueezeExcite:
            if (l.in_channels != channels) throw ShapeError(where + ": expects " + std::to_string(l.in_channels) + " channels, receives " + std::to_string(channels));
            break;
          case LayerKind::GlobalAvgPool:
            pooled = true;
            break;
          case LayerKind::Dense:
            if (!pooled) throw ShapeError(where + ": dense layer before pooling");
            if (l.in_channels != channels) throw ShapeError(where + ": expects " + std::to_string(l.in_channels) + " inputs, receives " + std::to_string(channels));
            channels = l.out_channels;
            break;
          case LayerKind::Activation:
          case LayerKind::Softmax:
            break;
        }
        before_last = last;
        last = &l;
      }
      if (block.residual && (strided || block_in != channels)) {
        throw ShapeError(block.name + ": residual block must keep shape (stride 1, equal channels)");
      }
    }
    if (!last || last->kind != LayerKind::Softmax || !before_last || before_last->kind != LayerKind::Dense) {
      throw ShapeError(name + ": model must end with Dense -> Softmax");
    }
    if (channels != num_classes) throw ShapeError(name + ": final dense width must equal num_classes");
  }
};

inline constexpr std::string_view kMiniMobileNetV2 = "mini-mobilenetv2";
inline constexpr std::string_view kMiniEfficientNetB0 = "mini-efficientnetb0";

struct BatchNormOptions {
  double momentum = 0.9;
  double epsilon = 1e-5;
};

// Miniature presets. Both share the skeleton
//   stem conv3x3/s2 (8) -> 5 inverted-residual blocks -> conv1x1 (64)
//   -> global average pool -> dense -> softmax
// with blocks (out, stride, expansion) = (16,1,2) (24,2,4) (24,1,4,res)
// (32,2,4) (32,1,4,res). mini-mobilenetv2 uses ReLU6; mini-efficientnetb0
// uses SiLU and adds squeeze-excitation (ratio 4) after each depthwise conv.
inline ModelSpec build_preset(std::string_view name, std::size_t num_classes, std::size_t in_channels,
                              BatchNormOptions bn = {}) {
  const bool efficient = name == kMiniEfficientNetB0;
  if (!efficient && name != kMiniMobileNetV2) throw UsageError("unknown model preset '" + std::string(name) + "'");
  if (num_classes < 2) throw UsageError("num_classes must be >= 2");
  if (in_channels != 1 && in_channels != 3) throw UsageError("in_channels must be 1 or 3");
  const auto act = efficient ? ActivationKind::SiLU : ActivationKind::ReLU6;

  auto conv = [](std::string n, std::size_t in, std::size_t out, std::size_t k, std::size_t s) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.name = std::move(n);
    l.in_channels = in;
    l.out_channels = out;
    l.kernel = k;
    l.stride = s;
    return l;
  };
  auto depthwise = [&](std::string n, std::size_t ch, std::size_t s) {
    LayerSpec l = conv(std::move(n), ch, ch, 3, s);
    l.kind = LayerKind::DepthwiseConv;
    return l;
  };
  auto norm = [&](std::string n, std::size_t ch) {
    LayerSpec l;
    l.kind = LayerKind::BatchNorm;
    l.name = std::move(n);
    l.in_channels = l.out_channels = ch;
    l.bn_momentum = bn.momentum;
    l.bn_epsilon = bn.epsilon;
    return l;
  };
  auto activation = [&](std::string n) {
    LayerSpec l;
    l.kind = LayerKind::Activation;
    l.name = std::move(n);
    l.activation = act;
    return l;
  };

  ModelSpec spec;
  spec.name = std::string(name);
  spec.num_classes = num_classes;
  spec.in_channels = in_channels;

  spec.blocks.push_back({"stem", {conv("conv", in_channels, 8, 3, 2), norm("bn", 8), activation("act")}, false});

  struct BlockCfg {
    std::size_t out, stride, expansion;
    bool residual;
  };
  constexpr BlockCfg cfgs[] = {{16, 1, 2, false}, {24, 2, 4, false}, {24, 1, 4, true}, {32, 2, 4, false}, {32, 1, 4, true}};
  std::size_t channels = 8;
  int index = 1;
  for (const auto& c : cfgs) {
    const std::size_t hidden = channels * c.expansion;
    BlockSpec b;
    b.name = "block" + std::to_string(index++);
    b.residual = c.residual;
    b.layers = {conv("expand", channels, hidden, 1, 1), norm("expand_bn", hidden), activation("expand_act"),
                depthwise("dw", hidden, c.stride), norm("dw_bn", hidden), activation("dw_act")};
    if (efficient) {
      LayerSpec se;
      se.kind = LayerKind::SqueezeExcite;
      se.name = "se";
      se.in_channels = se.out_channels = hidden;
      se.se_ratio = 4;
      b.layers.push_back(se);
    }
    b.layers.push_back(conv("project", hidden, c.out, 1, 1));
    b.layers.push_back(norm("project_bn", c.out));
    spec.blocks.push_back(std::move(b));
    channels = c.out;
  }

  LayerSpec pool;
  pool.kind = LayerKind::GlobalAvgPool;
  pool.name = "pool";
  LayerSpec dense;
  dense.kind = LayerKind::Dense;
  dense.name = "classifier";
  dense.in_channels = 64;
  dense.out_channels = num_classes;
  LayerSpec softmax;
  softmax.kind = LayerKind::Softmax;
  softmax.name = "softmax";
  spec.blocks.push_back(
      {"head", {conv("conv", channels, 64, 1, 1), norm("bn", 64), activation("act"), pool, dense, softmax}, false});
  spec.validate();
  return spec;
}

// Marks everything except the final Dense (and the Softmax after it) as not
// trainable. With unfreeze_last_block the last inverted-residual block and the
// head block stay trainable too.
inline ModelSpec freeze_backbone(ModelSpec spec, bool unfreeze_last_block = false) {
  for (auto& b : spec.blocks) {
    for (auto& l : b.layers) l.trainable = false;
  }
  auto& head = spec.blocks.back();
  head.layers.back().trainable = true;
  head.layers[head.layers.size() - 2].trainable = true;
  if (unfreeze_last_block && spec.blocks.size() >= 2) {
    for (auto& l : head.layers) l.trainable = true;
    for (auto& l : spec.blocks[spec.blocks.size() - 2].layers) l.trainable = true;
  }
  return spec;
}

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const std::string& prefix, const LayerSpec& l) {
  const std::string name = prefix + "." + l.name;
  switch (l.kind) {
    case LayerKind::Conv: return std::make_unique<Conv2d<T>>(name, l.in_channels, l.out_channels, l.kernel, l.stride);
    case LayerKind::DepthwiseConv:
      return std::make_unique<Conv2d<T>>(name, l.in_channels, l.out_channels, l.kernel, l.stride, l.in_channels);
    case LayerKind::BatchNorm: return std::make_unique<BatchNorm<T>>(name, l.in_channels, l.bn_momentum, l.bn_epsilon);
    case LayerKind::Activation: return std::make_unique<Activation<T>>(name, l.activation);
    case LayerKind::SqueezeExcite: return std::make_unique<SqueezeExcite<T>>(name, l.in_channels, l.se_ratio);
    case LayerKind::GlobalAvgPool: return std::make_unique<GlobalAvgPool<T>>(name);
    case LayerKind::Dense: return std::make_unique<Dense<T>>(name, l.in_channels, l.out_channels);
    case LayerKind::Softmax: return std::make_unique<Softmax<T>>(name);
  }
  throw UsageError("unknown layer kind");
}

// A sequence of layers with an optional identity skip around it.
template <typename T>
class Block {
 public:
  Block(const BlockSpec& spec) : name_(spec.name), residual_(spec.residual) {
    for (const auto& l : spec.layers) {
      layers_.push_back(make_layer<T>(spec.name, l));
      layers_.back()->set_trainable(l.trainable);
    }
  }

  const std::string& name() const { return name_; }
  bool residual() const { return residual_; }
  std::vector<std::unique_ptr<Layer<T>>>& layers() { return layers_; }
  const std::vector<std::unique_ptr<Layer<T>>>& layers() const { return layers_; }

  // Runs layers [0, end) (all by default).
  Tensor<T> forward(const Tensor<T>& x, Mode mode, std::size_t end = static_cast<std::size_t>(-1)) {
    Tensor<T> h = x;
    end = std::min(end, layers_.size());
    for (std::size_t i = 0; i < end; ++i) {
      try {
        h = layers_[i]->forward(h, mode);
      } catch (const ShapeError& e) {
        throw ShapeError("layer " + layers_[i]->name() + ": " + e.what());
      }
    }
    if (residual_) h += x;
    return h;
  }

  // Backward through layers [0, end). need_input_grad controls whether the
  // gradient w.r.t. the block input is produced.
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad,
                     std::size_t end = static_cast<std::size_t>(-1)) {
    end = std::min(end, layers_.size());
    Tensor<T> g = grad_out;
    for (std::size_t i = end; i-- > 0;) {
      bool earlier_trainable = need_input_grad;
      for (std::size_t j = 0; j < i && !earlier_trainable; ++j) earlier_trainable = layers_[j]->trainable();
      if (!earlier_trainable && !layers_[i]->trainable()) return {};
      g = layers_[i]->backward(g, earlier_trainable);
      if (!earlier_trainable) return {};
    }
    if (residual_) g += grad_out;
    return g;
  }

  bool any_trainable() const {
    for (const auto& l : layers_) {
      if (l->trainable()) return true;
    }
    return false;
  }

 private:
  std::string name_;
  bool residual_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

// Executable network built from a ModelSpec. The last layer is the Softmax;
// backward() starts from the gradient w.r.t. the logits feeding it.
template <typename T>
class Network {
 public:
  explicit Network(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    for (const auto& b : spec_.blocks) blocks_.emplace_back(b);
  }

  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  const std::string& name() const { return spec_.name; }
  std::vector<Block<T>>& blocks() { return blocks_; }

  // He-normal weights, zero biases, BN at identity.
  void initialize(Rng& rng) {
    for (auto& b : blocks_) {
      for (auto& l : b.layers()) {
        if (auto* conv = dynamic_cast<Conv2d<T>*>(l.get())) {
          auto* w = conv->params()[0];
          w->value = he_init<T>(w->value.shape(), conv->fan_in(), rng);
        } else if (auto* dense = dynamic_cast<Dense<T>*>(l.get())) {
          auto ps = dense->params();
          ps[0]->value = he_init<T>(ps[0]->value.shape(), dense->fan_in(), rng);
          ps[1]->value.fill(T{});
        } else if (auto* se = dynamic_cast<SqueezeExcite<T>*>(l.get())) {
          auto ps = se->params();
          ps[0]->value = he_init<T>(ps[0]->value.shape(), ps[0]->value.dim(1), rng);
          ps[1]->value.fill(T{});
          ps[2]->value = he_init<T>(ps[2]->value.shape(), ps[2]->value.dim(1), rng);
          ps[3]->value.fill(T{});
        }
      }
    }
  }

  // [B x C x H x W] -> class probabilities [B x K]. Logits stay available
  // through logits().
  Tensor<T> forward(const Tensor<T>& input, Mode mode) {
    if (input.rank() != 4 || input.dim(1) != spec_.in_channels) {
      throw ShapeError(spec_.name + ": expected input [B x " + std::to_string(spec_.in_channels) +
                       " x H x W], got " + shape_string(input.shape()));
    }
    Tensor<T> h = input;
    for (std::size_t i = 0; i + 1 < blocks_.size(); ++i) h = blocks_[i].forward(h, mode);
    auto& head = blocks_.back();
    logits_ = head.forward(h, mode, head.layers().size() - 1);
    return head.layers().back()->forward(logits_, mode);
  }

  const Tensor<T>& logits() const { return logits_; }

  // Accumulates gradients for trainable parameters. Returns the gradient
  // w.r.t. the network input when need_input_grad is set.
  Tensor<T> backward(const Tensor<T>& grad_logits, bool need_input_grad = false) {
    grad_logits.require_same_shape(logits_, spec_.name + " backward");
    Tensor<T> g = grad_logits;
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      bool earlier = need_input_grad;
      for (std::size_t j = 0; j < i && !earlier; ++j) earlier = blocks_[j].any_trainable();
      if (!earlier && !blocks_[i].any_trainable()) return {};
      const std::size_t end = i + 1 == blocks_.size() ? blocks_[i].layers().size() - 1 : static_cast<std::size_t>(-1);
      g = blocks_[i].backward(g, earlier, end);
      if (!earlier) return {};
    }
    return g;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  // All learned weights in checkpoint order (frozen ones included).
  std::vector<Param<T>*> parameters() {
    std::vector<Param<T>*> out;
    for (auto& b : blocks_) {
      for (auto& l : b.layers()) {
        for (auto* p : l->params()) out.push_back(p);
      }
    }
    return out;
  }

  std::vector<Param<T>*> trainable_parameters() {
    std::vector<Param<T>*> out;
    for (auto* p : parameters()) {
      if (p->trainable) out.push_back(p);
    }
    return out;
  }

  // Everything a checkpoint stores: per layer, weights then buffers.
  std::vector<Param<T>*> state() {
    std::vector<Param<T>*> out;
    for (auto& b : blocks_) {
      for (auto& l : b.layers()) {
        for (auto* p : l->params()) out.push_back(p);
        for (auto* p : l->buffers()) out.push_back(p);
      }
    }
    return out;
  }

  Param<T>* find(std::string_view name) {
    for (auto* p : state()) {
      if (p->name == name) return p;
    }
    return nullptr;
  }

  // Gradients of trainable parameters only, keyed by name.
  std::map<std::string, Tensor<T>> gradients() {
    std::map<std::string, Tensor<T>> out;
    for (auto* p : trainable_parameters()) out.emplace(p->name, p->grad);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

  void freeze_backbone(bool unfreeze_last_block = false) { apply_trainable(olivine::freeze_backbone(spec_, unfreeze_last_block)); }

  // Copies values (weights and buffers) from another network with the same
  // layout, converting the scalar type.
  template <typename U>
  void copy_state_from(Network<U>& other) {
    auto dst = state();
    auto src = other.state();
    if (dst.size() != src.size()) throw ShapeError("copy_state_from: layout mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i]->name != src[i]->name || dst[i]->value.shape() != src[i]->value.shape()) {
        throw ShapeError("copy_state_from: entry mismatch at " + dst[i]->name);
      }
      dst[i]->value = src[i]->value.template cast<T>();
    }
  }

 private:
  void apply_trainable(ModelSpec spec) {
    spec_ = std::move(spec);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      for (std::size_t l = 0; l < blocks_[b].layers().size(); ++l) {
        blocks_[b].layers()[l]->set_trainable(spec_.blocks[b].layers[l].trainable);
      }
    }
  }

  ModelSpec spec_;
  std::vector<Block<T>> blocks_;
  Tensor<T> logits_;
};

}  // namespace olivine
