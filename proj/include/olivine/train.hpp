#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "olivine/checkpoint.hpp"
#include "olivine/dataset.hpp"
#include "olivine/error.hpp"
#include "olivine/model.hpp"
#include "olivine/rng.hpp"

namespace olivine {

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> grad_logits;  // d loss / d logits, [B x K]
};

// Categorical cross-entropy on softmax outputs, averaged over the batch,
// log clamped at 1e-12. The gradient is taken w.r.t. the pre-softmax logits:
// (p - onehot(y)) / B.
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& probs, std::span<const std::size_t> labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: probabilities " + shape_string(probs.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = probs.dim(0), k = probs.dim(1);
  LossResult<T> out{0.0, Tensor<T>(probs.shape())};
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= k) throw UsageError("cross_entropy: label " + std::to_string(labels[b]) + " out of range");
    double row = 0.0;
    for (std::size_t j = 0; j < k; ++j) row += static_cast<double>(probs(b, j));
    if (std::abs(row - 1.0) > 1e-4) throw NumericError("cross_entropy: probability row does not sum to 1");
    total -= std::log(std::max(static_cast<double>(probs(b, labels[b])), 1e-12));
    for (std::size_t j = 0; j < k; ++j) {
      out.grad_logits(b, j) = (probs(b, j) - (j == labels[b] ? T(1) : T(0))) / static_cast<T>(batch);
    }
  }
  out.loss = total / static_cast<double>(batch);
  return out;
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
};

// One Adam update over the given parameters using their accumulated grads.
template <typename T>
void adam_step(std::span<Param<T>* const> params, AdamState<T>& state, double lr) {
  if (!(lr > 0.0)) throw UsageError("adam: learning rate must be > 0");
  for (const auto* p : params) {
    if (p->grad.shape() != p->value.shape()) throw ShapeError("adam: gradient shape mismatch for " + p->name);
    if (!p->grad.all_finite()) throw NumericError("adam: non-finite gradient in " + p->name);
  }
  ++state.step;
  const auto& o = state.options;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (auto* p : params) {
    auto [mit, m_new] = state.m.try_emplace(p->name, p->value.shape());
    auto [vit, v_new] = state.v.try_emplace(p->name, p->value.shape());
    Tensor<T>& m = mit->second;
    Tensor<T>& v = vit->second;
    if (m.shape() != p->value.shape()) throw ShapeError("adam: state shape mismatch for " + p->name);
    const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
    const T inv_c1 = static_cast<T>(1.0 / c1), inv_c2 = static_cast<T>(1.0 / c2);
    const T rate = static_cast<T>(lr), eps = static_cast<T>(o.epsilon);
    T* theta = p->value.data();
    const T* g = p->grad.data();
    T* mp = m.data();
    T* vp = v.data();
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      mp[i] = b1 * mp[i] + (T(1) - b1) * g[i];
      vp[i] = b2 * vp[i] + (T(1) - b2) * g[i] * g[i];
      const T m_hat = mp[i] * inv_c1;
      const T v_hat = vp[i] * inv_c2;
      theta[i] -= rate * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

template <typename T>
void adam_step(std::vector<Param<T>*> params, AdamState<T>& state, double lr) {
  adam_step(std::span<Param<T>* const>(params), state, lr);
}

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t max_epochs = 20;
  std::size_t batch_size = 32;
  std::size_t early_stop_patience = 5;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(learning_rate > 0.0)) throw UsageError("train.learning_rate must be > 0");
    if (max_epochs < 1) throw UsageError("train.max_epochs must be >= 1");
    if (early_stop_patience < 1) throw UsageError("train.early_stop_patience must be >= 1");
    if (batch_size < 1) throw UsageError("train.batch_size must be >= 1");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

// Tracks the best epoch by validation accuracy (ties: lower validation loss,
// then the earlier epoch). Training stops before epoch e + 1 once
// (e + 1) - best_epoch >= patience.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {
    if (patience == 0) throw UsageError("early stopping patience must be >= 1");
  }

  // Returns true when the record becomes the new best.
  bool observe(const EpochRecord& r) {
    const bool better = !has_best_ || r.val_acc > best_.val_acc ||
                        (r.val_acc == best_.val_acc && r.val_loss < best_.val_loss);
    if (better) {
      best_ = r;
      has_best_ = true;
    }
    return better;
  }

  bool should_stop(std::size_t completed_epoch) const {
    return has_best_ && completed_epoch + 1 - best_.epoch >= patience_;
  }

  std::size_t best_epoch() const { return best_.epoch; }
  const EpochRecord& best() const { return best_; }

 private:
  std::size_t patience_;
  EpochRecord best_;
  bool has_best_ = false;
};

struct EvalSummary {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<std::size_t> predictions;
  std::vector<std::size_t> labels;
};

// Feeds batches for one epoch to the sink.
using BatchStream = std::function<void(std::size_t epoch, const std::function<void(const Batch&)>& sink)>;
using Validator = std::function<EvalSummary(Network<float>&, std::size_t epoch)>;

inline EvalSummary evaluate_batches(Network<float>& net, const BatchStream& stream, std::size_t epoch = 0) {
  EvalSummary s;
  double loss_sum = 0.0;
  std::size_t n = 0, correct = 0;
  stream(epoch, [&](const Batch& batch) {
    const auto probs = net.forward(batch.inputs, Mode::Infer);
    const auto ce = cross_entropy(probs, batch.labels);
    loss_sum += ce.loss * static_cast<double>(batch.labels.size());
    for (std::size_t b = 0; b < batch.labels.size(); ++b) {
      const auto pred = argmax(std::span<const float>(probs.data() + b * probs.dim(1), probs.dim(1)));
      s.predictions.push_back(pred);
      s.labels.push_back(batch.labels[b]);
      correct += pred == batch.labels[b];
    }
    n += batch.labels.size();
  });
  if (n == 0) throw DataError("evaluation split is empty");
  s.loss = loss_sum / static_cast<double>(n);
  s.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return s;
}

struct TrainResult {
  Checkpoint best;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

// Adam + cross-entropy training with early stopping on validation accuracy.
// The network ends up holding the best epoch's weights, which are also
// returned as a checkpoint (epoch and val accuracy in its metadata).
inline TrainResult train_loop(Network<float>& net, const BatchStream& train, const Validator& validate,
                              const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  AdamState<float> adam;
  EarlyStopping stopper(cfg.early_stop_patience);
  TrainResult result;
  auto trainable = net.trainable_parameters();
  if (trainable.empty()) throw UsageError("train: model has no trainable parameters");
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0, batch_no = 0;
    train(epoch, [&](const Batch& batch) {
      ++batch_no;
      net.zero_grad();
      const auto probs = net.forward(batch.inputs, Mode::Train);
      const auto ce = cross_entropy(probs, batch.labels);
      if (!std::isfinite(ce.loss)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no));
      }
      net.backward(ce.grad_logits);
      adam_step(trainable, adam, cfg.learning_rate);
      loss_sum += ce.loss * static_cast<double>(batch.labels.size());
      for (std::size_t b = 0; b < batch.labels.size(); ++b) {
        correct += argmax(std::span<const float>(probs.data() + b * probs.dim(1), probs.dim(1))) == batch.labels[b];
      }
      seen += batch.labels.size();
    });
    if (seen == 0) throw DataError("training split is empty");
    const auto val = validate(net, epoch);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(seen), static_cast<double>(correct) / static_cast<double>(seen),
                    val.loss, val.accuracy};
    result.history.push_back(rec);
    if (stopper.observe(rec)) {
      result.best = capture_checkpoint(net, static_cast<std::uint32_t>(epoch), static_cast<float>(rec.val_acc));
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(rec);
    if (stopper.should_stop(epoch)) break;
  }
  apply_checkpoint(result.best, net);
  return result;
}

inline TrainResult train_loop(Network<float>& net, const BatchStream& train, const BatchStream& val,
                              const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  return train_loop(
      net, train, [&](Network<float>& n, std::size_t epoch) { return evaluate_batches(n, val, epoch); }, cfg, on_epoch);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (64-bit).

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

struct GradCheckOptions {
  double h = 1e-5;
  std::size_t max_samples = 256;  // used when the model has >= 2000 parameters
  std::uint64_t seed = 0;
  // Train-mode batch norm cancels per-channel shifts, so a beta feeding
  // conv -> batch norm has an exactly zero gradient and central differences
  // return loss roundoff (~1e-11), far above the 1e-8 floor. Inference mode
  // keeps every coordinate non-degenerate.
  Mode mode = Mode::Infer;
  // Runs after the analytic gradients are computed; lets tests corrupt them.
  std::function<void(Network<double>&)> tamper;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_entry;
  std::size_t checked = 0;
};

namespace detail {

// (parameter, flat index) pairs to probe: everything for small models,
// otherwise the first element of each tensor plus seeded random picks.
template <typename T>
std::vector<std::pair<Param<T>*, std::size_t>> sample_coordinates(const std::vector<Param<T>*>& params,
                                                                  std::size_t max_samples, std::uint64_t seed) {
  std::size_t total = 0;
  for (auto* p : params) total += p->value.size();
  std::vector<std::pair<Param<T>*, std::size_t>> coords;
  if (total < 2000) {
    for (auto* p : params) {
      for (std::size_t i = 0; i < p->value.size(); ++i) coords.emplace_back(p, i);
    }
    return coords;
  }
  for (auto* p : params) coords.emplace_back(p, 0);
  Rng rng(seed);
  while (coords.size() < std::max(max_samples, params.size())) {
    auto pos = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(total) - 1));
    for (auto* p : params) {
      if (pos < p->value.size()) {
        coords.emplace_back(p, pos);
        break;
      }
      pos -= p->value.size();
    }
  }
  return coords;
}

}  // namespace detail

// Compares backpropagated gradients of the cross-entropy loss with central
// differences (L(theta+h) - L(theta-h)) / 2h.
inline GradCheckResult gradient_check(Network<double>& net, const Tensor<double>& inputs,
                                      std::span<const std::size_t> labels, const GradCheckOptions& opt = {}) {
  auto loss_at = [&]() { return cross_entropy(net.forward(inputs, opt.mode), labels).loss; };
  net.zero_grad();
  const auto ce = cross_entropy(net.forward(inputs, opt.mode), labels);
  net.backward(ce.grad_logits);
  if (opt.tamper) opt.tamper(net);
  GradCheckResult result;
  for (auto [p, i] : detail::sample_coordinates(net.trainable_parameters(), opt.max_samples, opt.seed)) {
    const double saved = p->value[i];
    p->value[i] = saved + opt.h;
    const double plus = loss_at();
    p->value[i] = saved - opt.h;
    const double minus = loss_at();
    p->value[i] = saved;
    const double numeric = (plus - minus) / (2.0 * opt.h);
    const double err = relative_error(p->grad[i], numeric);
    ++result.checked;
    if (err > result.max_rel_error || result.worst_entry.empty()) {
      result.max_rel_error = std::max(err, result.max_rel_error);
      result.worst_entry = p->name + "[" + std::to_string(i) + "]";
    }
  }
  return result;
}

// Single-layer check with the linear loss L = sum(weights * layer(x)), so the
// upstream gradient is `weights`. Covers parameter and input gradients.
inline GradCheckResult check_layer_gradients(Layer<double>& layer, Tensor<double> input, Mode mode, std::uint64_t seed,
                                             double h = 1e-5) {
  Rng rng(seed);
  const auto probe = layer.forward(input, mode);
  Tensor<double> weights(probe.shape());
  for (auto& v : weights.values()) v = rng.uniform(-1.0, 1.0);
  auto loss_at = [&](const Tensor<double>& x) {
    const auto y = layer.forward(x, mode);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += weights[i] * y[i];
    return s;
  };
  for (auto* p : layer.params()) p->zero_grad();
  (void)layer.forward(input, mode);
  const auto grad_in = layer.backward(weights, true);
  GradCheckResult result;
  auto record = [&](double analytic, double numeric, const std::string& what) {
    const double err = relative_error(analytic, numeric);
    ++result.checked;
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_entry = what;
    }
  };
  for (auto* p : layer.params()) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double plus = loss_at(input);
      p->value[i] = saved - h;
      const double minus = loss_at(input);
      p->value[i] = saved;
      record(p->grad[i], (plus - minus) / (2.0 * h), p->name + "[" + std::to_string(i) + "]");
    }
  }
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double saved = input[i];
    input[i] = saved + h;
    const double plus = loss_at(input);
    input[i] = saved - h;
    const double minus = loss_at(input);
    input[i] = saved;
    record(grad_in[i], (plus - minus) / (2.0 * h), "input[" + std::to_string(i) + "]");
  }
  return result;
}

// Gradient check of a full preset at a reduced input size with randomized
// weights, batch-norm parameters and statistics, and inputs.
inline GradCheckResult gradient_check_preset(std::string_view preset, std::size_t size, std::uint64_t seed = 7,
                                             std::size_t num_classes = 5, std::size_t batch = 2,
                                             const GradCheckOptions& base = {}) {
  auto spec = build_preset(preset, num_classes, 3);
  spec.input_size = size;
  Network<double> net(spec);
  Rng rng(seed);
  net.initialize(rng);
  for (auto* p : net.state()) {
    if (p->name.ends_with(".running_mean")) {
      for (auto& v : p->value.values()) v = rng.uniform(-0.5, 0.5);
    } else if (p->name.ends_with(".running_var")) {
      for (auto& v : p->value.values()) v = rng.uniform(0.5, 1.5);
    } else if (p->name.ends_with(".gamma")) {
      for (auto& v : p->value.values()) v = rng.uniform(0.5, 1.5);
    } else if (p->name.ends_with(".beta") || p->name.ends_with(".bias")) {
      for (auto& v : p->value.values()) v = rng.uniform(-0.5, 0.5);
    }
  }
  Tensor<double> inputs({batch, 3, size, size});
  for (auto& v : inputs.values()) v = rng.uniform(-1.0, 1.0);
  std::vector<std::size_t> labels(batch);
  for (std::size_t b = 0; b < batch; ++b) labels[b] = b % num_classes;
  GradCheckOptions opt = base;
  opt.seed = seed;
  return gradient_check(net, inputs, labels, opt);
}

}  // namespace olivine
