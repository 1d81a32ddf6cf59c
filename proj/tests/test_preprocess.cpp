#include <gtest/gtest.h>

#include <cmath>

#include "olivine/dataset.hpp"
#include "olivine/preprocess.hpp"
#include "support.hpp"

using namespace olivine;

TEST(Otsu, MatchesExhaustiveScanOnRandomImages) {
  Rng rng(2024);
  for (int i = 0; i < 200; ++i) {
    const Image img = olivine::testing::random_image(rng, 32, 32, 1);
    ASSERT_EQ(otsu_threshold(img), olivine::testing::otsu_oracle(img)) << "image " << i;
  }
}

TEST(Otsu, MatchesExhaustiveScanOnLowEntropyImages) {
  // Few distinct levels make ties in the criterion likely.
  Rng rng(77);
  for (int i = 0; i < 100; ++i) {
    Image img(16, 16, 1);
    const int levels = static_cast<int>(rng.uniform_int(2, 5));
    std::vector<std::uint8_t> palette;
    for (int k = 0; k < levels; ++k) palette.push_back(static_cast<std::uint8_t>(rng.uniform_int(0, 255)));
    for (auto& p : img.pixels) p = palette[static_cast<std::size_t>(rng.uniform_int(0, levels - 1))];
    bool distinct = false;
    for (auto p : img.pixels) distinct |= p != img.pixels[0];
    if (!distinct) continue;
    ASSERT_EQ(otsu_threshold(img), olivine::testing::otsu_oracle(img)) << "image " << i;
  }
}

TEST(Otsu, TwoLevelImageSplitsBetweenLevels) {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const auto a = static_cast<int>(rng.uniform_int(0, 200));
    const auto b = static_cast<int>(rng.uniform_int(a + 1, 255));
    Image img(10, 10, 1, static_cast<std::uint8_t>(a));
    for (std::size_t k = 0; k < 37 + static_cast<std::size_t>(i); ++k) img.pixels[k] = static_cast<std::uint8_t>(b);
    const int t = otsu_threshold(img);
    EXPECT_GE(t, a);
    EXPECT_LT(t, b);
    EXPECT_EQ(t, a);  // smallest maximizer
  }
}

TEST(Otsu, SingleLevelImageIsAnError) {
  Image img(8, 8, 1, 128);
  EXPECT_THROW(otsu_threshold(img), DataError);
}

TEST(Histogram, ClassStatisticsAgreeWithDirectCounts) {
  Image img(4, 1, 1, std::vector<std::uint8_t>{10, 20, 200, 250});
  const auto h = Histogram::of(img);
  EXPECT_DOUBLE_EQ(h.omega0(20), 0.5);
  EXPECT_DOUBLE_EQ(h.omega1(20), 0.5);
  EXPECT_DOUBLE_EQ(h.mu0(20), 15.0);
  EXPECT_DOUBLE_EQ(h.mu1(20), 225.0);
  EXPECT_DOUBLE_EQ(h.between_class_variance(20), 0.25 * 210.0 * 210.0);
  EXPECT_DOUBLE_EQ(h.between_class_variance(255), 0.0);
}

TEST(Blur, KernelIsNormalizedAndSymmetric) {
  for (double sigma : {0.5, 1.0, 2.3}) {
    const auto k = gaussian_kernel(sigma);
    EXPECT_EQ(k.size(), 2 * static_cast<std::size_t>(std::ceil(3 * sigma)) + 1);
    double s = 0;
    for (double v : k) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
    for (std::size_t i = 0; i < k.size(); ++i) EXPECT_DOUBLE_EQ(k[i], k[k.size() - 1 - i]);
  }
  EXPECT_THROW(gaussian_kernel(0.0), UsageError);
}

TEST(Blur, ConstantImageIsUnchanged) {
  Image img(9, 7, 3, 123);
  EXPECT_EQ(gaussian_blur(img, 1.5), img);
}

TEST(Blur, ReflectIndexMirrorsWithoutRepeatingEdge) {
  EXPECT_EQ(detail::reflect_index(-1, 5), 1u);
  EXPECT_EQ(detail::reflect_index(-2, 5), 2u);
  EXPECT_EQ(detail::reflect_index(5, 5), 3u);
  EXPECT_EQ(detail::reflect_index(6, 5), 2u);
  EXPECT_EQ(detail::reflect_index(3, 5), 3u);
  EXPECT_EQ(detail::reflect_index(-4, 1), 0u);
}

TEST(Blur, ImpulseResponseMatchesSeparableKernel) {
  Image img(15, 15, 1, 0);
  img.at(7, 7) = 200;
  const auto k = gaussian_kernel(1.0);
  const Image out = gaussian_blur(img, 1.0);
  const std::size_t r = k.size() / 2;
  for (std::size_t dy = 0; dy < k.size(); ++dy) {
    for (std::size_t dx = 0; dx < k.size(); ++dx) {
      const double expect = 200.0 * k[dx] * k[dy];
      EXPECT_NEAR(out.at(7 + dx - r, 7 + dy - r), expect, 0.5 + 1e-9);
    }
  }
}

TEST(Resize, IdentityAndConstant) {
  Rng rng(4);
  const Image img = olivine::testing::random_image(rng, 12, 10, 3);
  EXPECT_EQ(resize_bilinear(img, 12, 10), img);
  Image flat(13, 5, 1, 77);
  EXPECT_EQ(resize_bilinear(flat, 40, 3), Image(40, 3, 1, 77));
}

TEST(Resize, HalvingAveragesPairs) {
  Image img(4, 1, 1, std::vector<std::uint8_t>{0, 100, 200, 50});
  const Image out = resize_bilinear(img, 2, 1);
  EXPECT_EQ(out.at(0, 0), 50);
  EXPECT_EQ(out.at(1, 0), 125);
}

TEST(Mask, ForegroundIsTheClassLessPresentOnTheBorder) {
  Image img(6, 6, 1, 220);
  for (std::size_t y = 2; y < 4; ++y)
    for (std::size_t x = 2; x < 4; ++x) img.at(x, y) = 30;
  const Mask m = foreground_mask(img, otsu_threshold(img));
  EXPECT_EQ(m.count(), 4u);
  EXPECT_TRUE(m.at(2, 2));
  EXPECT_FALSE(m.at(0, 0));
}

TEST(Mask, LargestComponentIsFourConnected) {
  Mask m(8, 8);
  // Three-pixel diagonal: three separate components under 4-connectivity.
  m.set(0, 0, true);
  m.set(1, 1, true);
  m.set(2, 2, true);
  // Four-pixel L shape.
  m.set(5, 4, true);
  m.set(5, 5, true);
  m.set(5, 6, true);
  m.set(6, 6, true);
  EXPECT_EQ(largest_component_bbox(m), (BBox{5, 4, 6, 6}));
  EXPECT_THROW(largest_component_bbox(Mask(3, 3)), DataError);
}

TEST(Mask, DepthBandAndCombination) {
  DepthMap d(4, 1, std::vector<std::uint16_t>{0, 400, 800, 1200});
  const Mask band = depth_foreground_mask(d, 300, 900);
  EXPECT_EQ(band.bits, (std::vector<std::uint8_t>{0, 1, 1, 0}));
  Mask other(4, 1, true);
  other.set(2, 0, false);
  EXPECT_EQ(combine_masks(band, other).bits, (std::vector<std::uint8_t>{0, 1, 0, 0}));
  EXPECT_THROW(depth_foreground_mask(d, 900, 300), UsageError);
}

TEST(Crop, MarginRoundsAndClamps) {
  Image img(20, 20, 1, 9);
  Mask all(20, 20, true);
  // Box 10 wide with margin 0.25 grows by lround(2.5) = 3 each side.
  const Image out = segment_and_crop(img, all, BBox{5, 5, 14, 14}, 16, 0.25);
  EXPECT_EQ(out.width, 16u);
  Image marked(20, 20, 1, 0);
  for (std::size_t y = 2; y <= 17; ++y)
    for (std::size_t x = 2; x <= 17; ++x) marked.at(x, y) = 255;
  // The grown box exactly covers the marked square.
  EXPECT_EQ(segment_and_crop(marked, all, BBox{5, 5, 14, 14}, 16, 0.25), Image(16, 16, 1, 255));
  // Clamped at the border.
  EXPECT_EQ(segment_and_crop(marked, all, BBox{0, 0, 3, 3}, 4, 0.5).width, 4u);
}

TEST(Crop, BackgroundIsZeroed) {
  Image img(4, 4, 3, 200);
  Mask m(4, 4);
  m.set(1, 1, true);
  m.set(2, 2, true);
  const Image out = segment_and_crop(img, m, BBox{1, 1, 2, 2}, 2, 0.0);
  EXPECT_EQ(out.at(0, 0, 0), 200);
  EXPECT_EQ(out.at(1, 0, 0), 0);
  EXPECT_EQ(out.at(1, 1, 2), 200);
}

TEST(Normalize, RangeLayoutAndInverse) {
  Rng rng(8);
  const Image img = olivine::testing::random_image(rng, 5, 4, 3);
  const auto t = normalize_to_tensor<double>(img);
  EXPECT_EQ(t.shape(), (Shape{3, 4, 5}));
  EXPECT_DOUBLE_EQ(t(1, 2, 3), img.at(3, 2, 1) / 127.5 - 1.0);
  Image extremes(2, 1, 1, std::vector<std::uint8_t>{0, 255});
  const auto e = normalize_to_tensor<double>(extremes);
  EXPECT_DOUBLE_EQ(e[0], -1.0);
  EXPECT_DOUBLE_EQ(e[1], 1.0);
  EXPECT_EQ(tensor_to_image(t), img);
  EXPECT_EQ(tensor_to_image(normalize_to_tensor<float>(img)), img);
}

TEST(Pipeline, SegmentsSyntheticSampleAroundTheShape) {
  Rng rng(12);
  const auto s = render_synthetic(0, 96, rng);
  PreprocessOptions opt;
  opt.out_size = 48;
  const auto r = preprocess_image(s.image, opt);
  EXPECT_TRUE(r.segmented);
  EXPECT_EQ(r.image.width, 48u);
  EXPECT_EQ(r.image.height, 48u);
  EXPECT_LT(r.box.width(), 96u);
  EXPECT_GT(r.box.width(), 96u / 5);
}

TEST(Pipeline, FlatImageFallsBackToResize) {
  Image img(30, 20, 3, 90);
  PreprocessOptions opt;
  opt.out_size = 16;
  const auto r = preprocess_image(img, opt);
  EXPECT_FALSE(r.segmented);
  EXPECT_EQ(r.image, Image(16, 16, 3, 90));
}

TEST(Pipeline, DepthMaskRequiresMatchingMap) {
  Rng rng(13);
  const auto s = render_synthetic(1, 64, rng);
  PreprocessOptions opt;
  opt.out_size = 32;
  opt.use_depth = true;
  EXPECT_THROW(preprocess_image(s.image, opt), UsageError);
  DepthMap wrong(10, 10, 500);
  EXPECT_THROW(preprocess_image(s.image, opt, &wrong), DataError);
  const auto r = preprocess_image(s.image, opt, &s.depth);
  EXPECT_TRUE(r.segmented);
}
