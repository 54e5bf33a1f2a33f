#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "sonoqa/preprocess.hpp"
#include "sonoqa/random.hpp"

using namespace sonoqa;

TEST(GaussianKernel, UnitMassForAnySigma) {
  for (double s : {0.3, 0.8, 1.0, 2.5}) {
    const auto k = gaussian_kernel(s);
    EXPECT_NEAR(std::accumulate(k.weights.begin(), k.weights.end(), 0.0), 1.0, 1e-12);
  }
}

TEST(GaussianKernel, RotationallySymmetric) {
  const auto k = gaussian_kernel(1.3);
  EXPECT_DOUBLE_EQ(k.at(1, 2), k.at(2, 1));
  EXPECT_DOUBLE_EQ(k.at(1, 2), k.at(-1, -2));
  EXPECT_DOUBLE_EQ(k.at(-2, 1), k.at(1, 2));
}

TEST(GaussianKernel, CenterWeightFromDirectSum) {
  const auto k = gaussian_kernel(1.0, 1);
  const double total = 1.0 + 4.0 * std::exp(-0.5) + 4.0 * std::exp(-1.0);
  EXPECT_NEAR(k.at(0, 0), 1.0 / total, 1e-15);
  EXPECT_NEAR(k.at(1, 1), std::exp(-1.0) / total, 1e-15);
}

TEST(GaussianKernel, RejectsBadArguments) {
  EXPECT_THROW(gaussian_kernel(0.0), ConfigError);
  EXPECT_THROW(gaussian_kernel(1.0, 0), ConfigError);
}

TEST(Smooth, ConstantImageUnchanged) {
  const GrayImage img(20, 13, 0.37);
  const auto out = smooth(img, gaussian_kernel(1.5));
  for (double v : out.pixels()) EXPECT_NEAR(v, 0.37, 1e-14);
}

TEST(Smooth, ImpulseReproducesKernel) {
  GrayImage img(15, 15, 0.0);
  img.at(7, 7) = 1.0;
  const auto k = gaussian_kernel(1.0);
  const auto out = smooth(img, k);
  for (int dy = -k.radius; dy <= k.radius; ++dy)
    for (int dx = -k.radius; dx <= k.radius; ++dx) EXPECT_NEAR(out.at(7 + dx, 7 + dy), k.at(dx, dy), 1e-15);
  EXPECT_EQ(out.at(0, 0), 0.0);
}

TEST(Smooth, SeparableMatchesTwoDimensional) {
  Rng rng(21);
  GrayImage img(23, 17);
  for (auto& p : img.pixels()) p = rng.uniform();
  const auto a = smooth(img, gaussian_kernel(1.2, 4));
  const auto b = smooth_separable(img, 1.2, 4);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.pixels()[i], b.pixels()[i], 1e-10);
}

TEST(StripText, NothingAboveThreshold) {
  Rng rng(22);
  GrayImage img(32, 32);
  for (auto& p : img.pixels()) p = 0.8 * rng.uniform();
  const auto out = strip_overlay_text(img, 0.9, default_border_band(img));
  EXPECT_EQ(out.pixels(), img.pixels());
  const GrayImage black(32, 32, 0.0);
  EXPECT_EQ(strip_overlay_text(black, 0.9, 4).pixels(), black.pixels());
}

TEST(StripText, CornerGlyphReplacedInteriorUntouched) {
  GrayImage img(64, 64, 0.2);
  img.at(32, 32) = 1.0;  // bright interior structure
  for (std::size_t y = 1; y < 6; ++y)
    for (std::size_t x = 1; x < 4; ++x) img.at(x, y) = 1.0;  // 3x5 glyph block
  const auto out = strip_overlay_text(img, 0.9, default_border_band(img));
  for (std::size_t y = 1; y < 6; ++y)
    for (std::size_t x = 1; x < 4; ++x) EXPECT_EQ(out.at(x, y), 0.2);
  EXPECT_EQ(out.at(32, 32), 1.0);
}

TEST(Preprocess, BorderTextDoesNotLeakAfterSmoothing) {
  GrayImage img(64, 64, 0.1);
  for (std::size_t x = 2; x < 12; ++x) img.at(x, 2) = 1.0;
  const auto out = preprocess(img);
  for (double v : out.pixels()) EXPECT_NEAR(v, 0.1, 1e-12);
}
