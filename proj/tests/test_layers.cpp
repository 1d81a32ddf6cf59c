#include <gtest/gtest.h>

#include <cmath>

#include "olivine/layers.hpp"
#include "olivine/train.hpp"

using namespace olivine;

namespace {

constexpr double kTol = 1e-4;

Tensor<double> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

void randomize(Layer<double>& layer, Rng& rng) {
  for (auto* p : layer.params()) {
    for (auto& v : p->value.values()) v = rng.uniform(-1.0, 1.0);
  }
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(LayerGradients, Conv) {
  Rng rng(1);
  for (std::size_t stride : {1u, 2u}) {
    Conv2d<double> conv("c", 3, 4, 3, stride);
    randomize(conv, rng);
    const auto r = check_layer_gradients(conv, random_tensor({2, 3, 6, 5}, rng), Mode::Train, 10 + stride);
    EXPECT_LE(r.max_rel_error, kTol) << r.worst_entry;
    EXPECT_GT(r.checked, 100u);
  }
}

TEST(LayerGradients, PointwiseConv) {
  Rng rng(2);
  Conv2d<double> conv("p", 4, 6, 1, 1);
  randomize(conv, rng);
  const auto r = check_layer_gradients(conv, random_tensor({2, 4, 3, 3}, rng), Mode::Train, 2);
  EXPECT_LE(r.max_rel_error, kTol) << r.worst_entry;
}

TEST(LayerGradients, DepthwiseConv) {
  Rng rng(3);
  for (std::size_t stride : {1u, 2u}) {
    Conv2d<double> dw("dw", 4, 4, 3, stride, 4);
    EXPECT_EQ(dw.kind(), "DepthwiseConv");
    randomize(dw, rng);
    const auto r = check_layer_gradients(dw, random_tensor({2, 4, 5, 6}, rng), Mode::Train, 3);
    EXPECT_LE(r.max_rel_error, kTol) << r.worst_entry;
  }
}

TEST(LayerGradients, BatchNormTrainAndInfer) {
  Rng rng(4);
  for (Mode mode : {Mode::Train, Mode::Infer}) {
    BatchNorm<double> bn("bn", 3);
    randomize(bn, rng);
    const auto r = check_layer_gradients(bn, random_tensor({3, 3, 2, 3}, rng), mode, 4);
    EXPECT_LE(r.max_rel_error, kTol) << r.worst_entry;
  }
  BatchNorm<double> flat("bn2", 4);
  randomize(flat, rng);
  const auto r = check_layer_gradients(flat, random_tensor({5, 4}, rng), Mode::Train, 5);
  EXPECT_LE(r.max_rel_error, kTol) << r.worst_entry;
}

TEST(LayerGradients, Activations) {
  Rng rng(5);
  // Keep ReLU6 inputs away from its kinks at 0 and 6.
  auto x = random_tensor({2, 3, 4, 4}, rng, -3.0, 9.0);
  for (auto& v : x.values()) {
    if (std::abs(v) < 0.05 || std::abs(v - 6.0) < 0.05) v += 0.2;
  }
  Activation<double> relu6("r", ActivationKind::ReLU6);
  auto r = check_layer_gradients(relu6, x, Mode::Train, 6);
  EXPECT_LE(r.max_rel_error, kTol) << r.worst_entry;
  Activation<double> silu_layer("s", ActivationKind::SiLU);
  r = check_layer_gradients(silu_layer, random_tensor({2, 3, 4, 4}, rng, -6.0, 6.0), Mode::Train, 7);
  EXPECT_LE(r.max_rel_error, kTol) << r.worst_entry;
}

TEST(LayerGradients, SqueezeExcite) {
  Rng rng(6);
  SqueezeExcite<double> se("se", 8, 4);
  EXPECT_EQ(se.reduced(), 2u);
  randomize(se, rng);
  const auto r = check_layer_gradients(se, random_tensor({2, 8, 3, 3}, rng), Mode::Train, 8);
  EXPECT_LE(r.max_rel_error, kTol) << r.worst_entry;
}

TEST(LayerGradients, PoolDenseSoftmax) {
  Rng rng(7);
  GlobalAvgPool<double> pool("pool");
  auto r = check_layer_gradients(pool, random_tensor({2, 3, 3, 2}, rng), Mode::Train, 9);
  EXPECT_LE(r.max_rel_error, kTol) << r.worst_entry;
  Dense<double> dense("fc", 6, 4);
  randomize(dense, rng);
  r = check_layer_gradients(dense, random_tensor({3, 6}, rng), Mode::Train, 10);
  EXPECT_LE(r.max_rel_error, kTol) << r.worst_entry;
  Softmax<double> sm("sm");
  r = check_layer_gradients(sm, random_tensor({3, 5}, rng, -3.0, 3.0), Mode::Train, 11);
  EXPECT_LE(r.max_rel_error, kTol) << r.worst_entry;
}

TEST(BatchNorm, TrainForwardNormalizesPerChannel) {
  Rng rng(8);
  BatchNorm<double> bn("bn", 2, 0.9, 1e-5);
  auto x = random_tensor({4, 2, 3, 3}, rng, -5.0, 5.0);
  const auto y = bn.forward(x, Mode::Train);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, s2 = 0, xs = 0, xs2 = 0;
    const double n = 36;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
          s += y(b, c, i, j);
          s2 += y(b, c, i, j) * y(b, c, i, j);
          xs += x(b, c, i, j);
          xs2 += x(b, c, i, j) * x(b, c, i, j);
        }
    EXPECT_NEAR(s / n, 0.0, 1e-12);
    const double var = xs2 / n - (xs / n) * (xs / n);
    EXPECT_NEAR(s2 / n, var / (var + 1e-5), 1e-9);
    // Running statistics: momentum-weighted, variance unbiased.
    const auto buffers = bn.buffers();
    EXPECT_NEAR(buffers[0]->value[c], 0.1 * (xs / n), 1e-12);
    EXPECT_NEAR(buffers[1]->value[c], 0.9 + 0.1 * var * n / (n - 1), 1e-12);
  }
}

TEST(BatchNorm, InferUsesRunningStatistics) {
  BatchNorm<double> bn("bn", 1, 0.9, 0.0001);
  auto buffers = bn.buffers();
  buffers[0]->value[0] = 2.0;
  buffers[1]->value[0] = 4.0;
  bn.params()[0]->value[0] = 3.0;
  bn.params()[1]->value[0] = 1.0;
  const auto y = bn.forward(Tensor<double>({1, 1, 1, 2}, std::vector<double>{2.0, 6.0}), Mode::Infer);
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], 1.0 + 3.0 * 4.0 / std::sqrt(4.0001), 1e-12);
  EXPECT_EQ(buffers[0]->value[0], 2.0);
}

TEST(BatchNorm, FrozenLayerUsesRunningStatsAndLeavesGradients) {
  Rng rng(9);
  BatchNorm<double> bn("bn", 2);
  bn.set_trainable(false);
  const auto x = random_tensor({2, 2, 2, 2}, rng);
  (void)bn.forward(x, Mode::Train);
  EXPECT_EQ(bn.buffers()[0]->value[0], 0.0);
  EXPECT_TRUE(bn.backward(Tensor<double>(x.shape(), 1.0), false).empty());
  EXPECT_EQ(bn.params()[0]->grad[0], 0.0);
  EXPECT_FALSE(bn.params()[0]->trainable);
}

TEST(Activation, ValuesMatchDefinitions) {
  Activation<double> relu6("r", ActivationKind::ReLU6);
  Activation<double> silu_layer("s", ActivationKind::SiLU);
  const Tensor<double> x({6}, std::vector<double>{-800.0, -2.0, 0.0, 3.5, 7.0, 800.0});
  const auto r = relu6.forward(x, Mode::Infer);
  EXPECT_EQ(r, (Tensor<double>({6}, std::vector<double>{0, 0, 0, 3.5, 6, 6})));
  const auto s = silu_layer.forward(x, Mode::Infer);
  for (std::size_t i = 1; i < 5; ++i) EXPECT_NEAR(s[i], x[i] * sigmoid_ref(x[i]), 1e-15);
  EXPECT_EQ(s[0], -0.0);
  EXPECT_EQ(s[5], 800.0);
  EXPECT_TRUE(s.all_finite());
}

TEST(Activation, SiLUOverManyBlocks) {
  Rng rng(10);
  Activation<float> a("s", ActivationKind::SiLU);
  Tensor<float> x({3 * 4096 + 17});
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-10, 10));
  const auto y = a.forward(x, Mode::Train);
  for (std::size_t i = 0; i < x.size(); i += 97) {
    EXPECT_NEAR(y[i], x[i] * sigmoid_ref(x[i]), 1e-5);
  }
}

TEST(Dense, AffineMatchesHandComputation) {
  Dense<double> d("fc", 2, 2);
  auto ps = d.params();
  ps[0]->value = Tensor<double>({2, 2}, std::vector<double>{1, 2, 3, 4});
  ps[1]->value = Tensor<double>({2}, std::vector<double>{0.5, -1});
  const auto y = d.forward(Tensor<double>({1, 2}, std::vector<double>{1, -1}), Mode::Train);
  EXPECT_EQ(y, (Tensor<double>({1, 2}, std::vector<double>{-0.5, -2})));
}

TEST(Softmax, RowsSumToOneAndAreShiftInvariant) {
  const Tensor<double> x({2, 3}, std::vector<double>{1, 2, 3, 1001, 1002, 1003});
  const auto p = Softmax<double>::softmax_rows(x);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_NEAR(p(r, 0), std::exp(1.0) / z, 1e-15);
    EXPECT_NEAR(p(r, 2), std::exp(3.0) / z, 1e-15);
  }
}

TEST(SqueezeExcite, ForwardMatchesComposition) {
  Rng rng(11);
  SqueezeExcite<double> se("se", 4, 2);
  randomize(se, rng);
  const auto x = random_tensor({1, 4, 2, 2}, rng);
  const auto y = se.forward(x, Mode::Train);
  auto ps = se.params();
  const auto &w1 = ps[0]->value, &b1 = ps[1]->value, &w2 = ps[2]->value, &b2 = ps[3]->value;
  double mean[4];
  for (std::size_t c = 0; c < 4; ++c) mean[c] = (x(0, c, 0, 0) + x(0, c, 0, 1) + x(0, c, 1, 0) + x(0, c, 1, 1)) / 4;
  double hid[2];
  for (std::size_t j = 0; j < 2; ++j) {
    double s = b1[j];
    for (std::size_t c = 0; c < 4; ++c) s += w1(j, c) * mean[c];
    hid[j] = s * sigmoid_ref(s);
  }
  for (std::size_t c = 0; c < 4; ++c) {
    double s = b2[c];
    for (std::size_t j = 0; j < 2; ++j) s += w2(c, j) * hid[j];
    EXPECT_NEAR(y(0, c, 1, 0), x(0, c, 1, 0) * sigmoid_ref(s), 1e-14);
  }
}

TEST(Layers, ShapeErrorsNameTheLayer) {
  Conv2d<double> conv("block1.expand", 3, 4, 1, 1);
  try {
    (void)conv.forward(Tensor<double>({1, 5, 2, 2}), Mode::Train);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("block1.expand"), std::string::npos);
  }
  EXPECT_THROW(Conv2d<double>("c", 3, 4, 2, 1), ShapeError);
  Dense<double> d("fc", 4, 2);
  EXPECT_THROW(d.forward(Tensor<double>({1, 3}), Mode::Train), ShapeError);
}

TEST(Layers, FrozenConvAccumulatesNoGradient) {
  Rng rng(12);
  Conv2d<double> conv("c", 2, 2, 3, 1);
  randomize(conv, rng);
  conv.set_trainable(false);
  const auto x = random_tensor({1, 2, 4, 4}, rng);
  const auto y = conv.forward(x, Mode::Train);
  const auto gi = conv.backward(Tensor<double>(y.shape(), 1.0), true);
  EXPECT_EQ(gi.shape(), x.shape());
  for (double g : conv.params()[0]->grad.values()) EXPECT_EQ(g, 0.0);
}
