#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "olivine/train.hpp"

using namespace olivine;

namespace {

// Linearly separable toy batches: class c has its mean shifted in channel c.
std::vector<Batch> toy_batches(std::size_t count, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Batch> out;
  for (std::size_t n = 0; n < count; ++n) {
    Batch b;
    b.inputs = Tensor<float>({batch, 3, 16, 16});
    for (std::size_t i = 0; i < batch; ++i) {
      const std::size_t label = (n * batch + i) % 3;
      b.labels.push_back(label);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < 256; ++p)
          b.inputs[((i * 3) + c) * 256 + p] = static_cast<float>(rng.uniform(-0.3, 0.3) + (c == label ? 0.7 : -0.3));
    }
    out.push_back(std::move(b));
  }
  return out;
}

BatchStream stream_of(const std::vector<Batch>& batches) {
  return [&batches](std::size_t, const std::function<void(const Batch&)>& sink) {
    for (const auto& b : batches) sink(b);
  };
}

EpochRecord rec(std::size_t epoch, double val_acc, double val_loss = 1.0) {
  EpochRecord r;
  r.epoch = epoch;
  r.val_acc = val_acc;
  r.val_loss = val_loss;
  return r;
}

}  // namespace

TEST(CrossEntropy, HandComputedLossAndGradient) {
  const Tensor<double> p({2, 3}, std::vector<double>{0.7, 0.2, 0.1, 0.25, 0.25, 0.5});
  const std::vector<std::size_t> y{0, 2};
  const auto r = cross_entropy(p, y);
  EXPECT_NEAR(r.loss, -(std::log(0.7) + std::log(0.5)) / 2.0, 1e-15);
  EXPECT_NEAR(r.grad_logits(0, 0), (0.7 - 1.0) / 2.0, 1e-15);
  EXPECT_NEAR(r.grad_logits(0, 1), 0.2 / 2.0, 1e-15);
  EXPECT_NEAR(r.grad_logits(1, 2), (0.5 - 1.0) / 2.0, 1e-15);
}

TEST(CrossEntropy, ClampsZeroProbability) {
  const Tensor<double> p({1, 2}, std::vector<double>{1.0, 0.0});
  const std::vector<std::size_t> y{1};
  EXPECT_NEAR(cross_entropy(p, y).loss, -std::log(1e-12), 1e-9);
}

TEST(CrossEntropy, GradientMatchesSoftmaxFiniteDifference) {
  Rng rng(1);
  Tensor<double> z({3, 4});
  for (auto& v : z.values()) v = rng.uniform(-2, 2);
  const std::vector<std::size_t> y{3, 0, 1};
  const auto r = cross_entropy(Softmax<double>::softmax_rows(z), y);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double saved = z[i];
    z[i] = saved + 1e-6;
    const double lp = cross_entropy(Softmax<double>::softmax_rows(z), y).loss;
    z[i] = saved - 1e-6;
    const double lm = cross_entropy(Softmax<double>::softmax_rows(z), y).loss;
    z[i] = saved;
    EXPECT_NEAR(r.grad_logits[i], (lp - lm) / 2e-6, 1e-8);
  }
}

TEST(CrossEntropy, RejectsBadInput) {
  const Tensor<double> p({1, 2}, std::vector<double>{0.5, 0.5});
  EXPECT_THROW(cross_entropy(p, std::vector<std::size_t>{2}), UsageError);
  EXPECT_THROW(cross_entropy(p, std::vector<std::size_t>{0, 1}), ShapeError);
  const Tensor<double> q({1, 2}, std::vector<double>{0.5, 0.6});
  EXPECT_THROW(cross_entropy(q, std::vector<std::size_t>{0}), NumericError);
}

TEST(Adam, FirstTwoStepsByHand) {
  Param<double> p("w", Tensor<double>({2}, std::vector<double>{1.0, -1.0}));
  AdamState<double> st;
  std::vector<Param<double>*> ps{&p};
  p.grad = Tensor<double>({2}, std::vector<double>{0.5, -2.0});
  adam_step(ps, st, 0.1);
  // Bias correction makes the first step lr * g / (|g| + eps).
  EXPECT_NEAR(p.value[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(p.value[1], -1.0 + 0.1 * 2.0 / (2.0 + 1e-8), 1e-12);
  p.grad = Tensor<double>({2}, std::vector<double>{1.0, 0.0});
  const double before = p.value[0];
  adam_step(ps, st, 0.1);
  const double m = 0.9 * 0.05 + 0.1 * 1.0;
  const double v = 0.999 * 0.001 * 0.25 + 0.001 * 1.0;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(p.value[0], before - 0.1 * mh / (std::sqrt(vh) + 1e-8), 1e-12);
  EXPECT_EQ(st.step, 2u);
}

TEST(Adam, RejectsNonFiniteGradientsAndBadRate) {
  Param<double> p("layer.w", Tensor<double>({1}, 0.0));
  AdamState<double> st;
  std::vector<Param<double>*> ps{&p};
  EXPECT_THROW(adam_step(ps, st, 0.0), UsageError);
  p.grad[0] = std::numeric_limits<double>::infinity();
  try {
    adam_step(ps, st, 0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.w"), std::string::npos);
  }
}

TEST(EarlyStopping, ScriptedSequenceStopsAfterEpochSix) {
  const double acc[] = {0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6};
  EarlyStopping es(5);
  std::size_t stopped = 0;
  for (std::size_t e = 1; e <= 7; ++e) {
    es.observe(rec(e, acc[e - 1]));
    if (es.should_stop(e)) {
      stopped = e;
      break;
    }
  }
  EXPECT_EQ(stopped, 6u);
  EXPECT_EQ(es.best_epoch(), 2u);
}

TEST(EarlyStopping, TiesBrokenByValidationLoss) {
  EarlyStopping es(3);
  EXPECT_TRUE(es.observe(rec(1, 0.8, 0.5)));
  EXPECT_FALSE(es.observe(rec(2, 0.8, 0.5)));
  EXPECT_TRUE(es.observe(rec(3, 0.8, 0.4)));
  EXPECT_FALSE(es.observe(rec(4, 0.7, 0.1)));
  EXPECT_EQ(es.best_epoch(), 3u);
  EXPECT_FALSE(es.should_stop(4));
  EXPECT_TRUE(es.should_stop(5));
  EXPECT_THROW(EarlyStopping(0), UsageError);
}

TEST(TrainLoop, LearnsToyProblemAndRestoresBestEpoch) {
  const auto train = toy_batches(6, 8, 1);
  const auto val = toy_batches(2, 9, 2);
  Network<float> net(build_preset(kMiniMobileNetV2, 3, 3));
  Rng rng(3);
  net.initialize(rng);
  TrainConfig cfg;
  cfg.max_epochs = 8;
  cfg.learning_rate = 0.005;
  std::vector<EpochRecord> seen;
  const auto result = train_loop(net, stream_of(train), stream_of(val), cfg, [&](const EpochRecord& r) { seen.push_back(r); });
  ASSERT_EQ(result.history.size(), seen.size());
  EXPECT_LT(result.history.back().train_loss, result.history.front().train_loss);
  EXPECT_GE(result.best.best_val_metric, 0.9f);
  // The checkpoint metadata describes the best epoch, and the network holds it.
  const auto& best = result.history[result.best_epoch - 1];
  EXPECT_EQ(result.best.epoch, result.best_epoch);
  EXPECT_EQ(result.best.best_val_metric, static_cast<float>(best.val_acc));
  for (const auto& r : result.history) {
    EXPECT_TRUE(r.val_acc < best.val_acc || (r.val_acc == best.val_acc && r.val_loss >= best.val_loss));
  }
  EXPECT_EQ(capture_checkpoint(net, result.best.epoch, result.best.best_val_metric), result.best);
  const auto again = evaluate_batches(net, stream_of(val));
  EXPECT_NEAR(again.accuracy, best.val_acc, 1e-12);
}

TEST(TrainLoop, ScriptedValidatorStopsEarly) {
  const auto train = toy_batches(1, 4, 5);
  Network<float> net(build_preset(kMiniMobileNetV2, 3, 3));
  Rng rng(4);
  net.initialize(rng);
  const double acc[] = {0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6};
  std::vector<Checkpoint> snapshots;
  Validator scripted = [&](Network<float>& n, std::size_t epoch) {
    snapshots.push_back(capture_checkpoint(n));
    EvalSummary s;
    s.accuracy = acc[epoch - 1];
    s.loss = 1.0;
    return s;
  };
  TrainConfig cfg;
  cfg.max_epochs = 10;
  const auto result = train_loop(net, stream_of(train), scripted, cfg);
  EXPECT_EQ(result.history.size(), 6u);
  EXPECT_EQ(result.best_epoch, 2u);
  EXPECT_EQ(result.best.epoch, 2u);
  EXPECT_EQ(result.best.best_val_metric, 0.6f);
  EXPECT_EQ(result.best.entries, snapshots[1].entries);
  EXPECT_EQ(capture_checkpoint(net).entries, snapshots[1].entries);
}

TEST(TrainLoop, NonFiniteLossIsNumericError) {
  auto train = toy_batches(2, 4, 6);
  train[1].inputs[0] = std::numeric_limits<float>::quiet_NaN();
  Network<float> net(build_preset(kMiniMobileNetV2, 3, 3));
  Rng rng(5);
  net.initialize(rng);
  TrainConfig cfg;
  cfg.max_epochs = 1;
  try {
    train_loop(net, stream_of(train), stream_of(train), cfg);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch 2"), std::string::npos) << e.what();
  }
}

TEST(TrainLoop, FrozenBackboneChangesOnlyHead) {
  const auto train = toy_batches(3, 6, 7);
  Network<float> net(build_preset(kMiniEfficientNetB0, 3, 3));
  Rng rng(6);
  net.initialize(rng);
  const auto before = capture_checkpoint(net);
  net.freeze_backbone();
  TrainConfig cfg;
  cfg.max_epochs = 2;
  train_loop(net, stream_of(train), stream_of(train), cfg);
  const auto after = capture_checkpoint(net);
  for (std::size_t i = 0; i < before.entries.size(); ++i) {
    const bool head = before.entries[i].name.starts_with("head.classifier.");
    EXPECT_EQ(before.entries[i] == after.entries[i], !head) << before.entries[i].name;
  }
}

TEST(GradCheck, SmallModelsSampleEveryCoordinate) {
  std::vector<Param<double>*> none;
  Param<double> a("a", Tensor<double>({10})), b("b", Tensor<double>({3, 3}));
  std::vector<Param<double>*> ps{&a, &b};
  EXPECT_EQ(detail::sample_coordinates(ps, 256, 1).size(), 19u);
  Param<double> big("big", Tensor<double>({3000}));
  std::vector<Param<double>*> bs{&a, &big};
  const auto coords = detail::sample_coordinates(bs, 256, 1);
  EXPECT_EQ(coords.size(), 256u);
  EXPECT_EQ(coords[0].first, &a);
  EXPECT_EQ(coords[1].first, &big);
  EXPECT_EQ(coords[1].second, 0u);
}

TEST(GradCheck, RelativeErrorDefinition) {
  EXPECT_NEAR(relative_error(1.0, 1.1), 0.1 / 1.1, 1e-15);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
}

TEST(GradCheck, BothPresetsPassAtSixteenPixels) {
  for (auto name : {kMiniMobileNetV2, kMiniEfficientNetB0}) {
    const auto r = gradient_check_preset(name, 16);
    EXPECT_LE(r.max_rel_error, 1e-4) << name << " worst " << r.worst_entry;
    EXPECT_GE(r.checked, 256u);
  }
}

TEST(GradCheck, DetectsCorruptedGradients) {
  GradCheckOptions opt;
  opt.tamper = [](Network<double>& net) {
    for (auto& v : net.find("head.classifier.weight")->grad.values()) v *= -1.0;
  };
  const auto r = gradient_check_preset(kMiniMobileNetV2, 16, 7, 5, 2, opt);
  EXPECT_GT(r.max_rel_error, 0.3);
  EXPECT_NE(r.worst_entry.find("classifier"), std::string::npos);
}

// Train-mode batch norm: every coordinate matches except betas whose output
// only reaches another batch norm through linear layers. Those have a zero
// gradient, and central differences there measure loss roundoff.
TEST(GradCheck, TrainModeMatchesAwayFromCancelledShifts) {
  for (auto name : {kMiniMobileNetV2, kMiniEfficientNetB0}) {
    auto spec = build_preset(name, 5, 3);
    spec.input_size = 16;
    Network<double> net(spec);
    Rng rng(11);
    net.initialize(rng);
    for (auto* p : net.parameters()) {
      if (p->name.ends_with(".beta") || p->name.ends_with(".bias")) {
        for (auto& v : p->value.values()) v = rng.uniform(-0.5, 0.5);
      }
    }
    Tensor<double> x({3, 3, 16, 16});
    for (auto& v : x.values()) v = rng.uniform(-1.0, 1.0);
    const std::vector<std::size_t> labels{0, 3, 4};
    auto loss = [&] { return cross_entropy(net.forward(x, Mode::Train), labels).loss; };
    net.zero_grad();
    net.backward(cross_entropy(net.forward(x, Mode::Train), labels).grad_logits);
    std::size_t cancelled = 0;
    for (auto [p, i] : detail::sample_coordinates(net.trainable_parameters(), 256, 3)) {
      const double saved = p->value[i];
      p->value[i] = saved + 1e-5;
      const double plus = loss();
      p->value[i] = saved - 1e-5;
      const double minus = loss();
      p->value[i] = saved;
      const double numeric = (plus - minus) / 2e-5;
      const double analytic = p->grad[i];
      if (p->name.ends_with("project_bn.beta")) {
        EXPECT_LT(std::abs(analytic), 1e-14) << p->name;
        EXPECT_LT(std::abs(numeric), 1e-9) << p->name;
        ++cancelled;
      } else {
        EXPECT_LE(relative_error(analytic, numeric), 1e-4) << name << " " << p->name << "[" << i << "] analytic " << analytic << " numeric " << numeric;
      }
    }
    EXPECT_GE(cancelled, 5u);
  }
}
