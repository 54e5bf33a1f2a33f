#include <gtest/gtest.h>

#include "sonoqa/backbone.hpp"
#include "sonoqa/random.hpp"

using namespace sonoqa;

namespace {
GrayImage noise(std::size_t w, std::size_t h, std::uint64_t seed) {
  Rng rng(seed);
  GrayImage img(w, h);
  for (auto& p : img.pixels()) p = rng.uniform();
  return img;
}
}  // namespace

TEST(FenConfig, StageWidths) {
  using W = std::array<std::size_t, 5>;
  EXPECT_EQ(FenConfig{1.0}.channels(), (W{128, 256, 512, 1024, 2048}));
  EXPECT_EQ(FenConfig{16.0}.channels(), (W{8, 16, 32, 64, 128}));
  EXPECT_THROW(FenConfig{3.0}.channels(), ConfigError);
  EXPECT_THROW(FenConfig{0.0}.channels(), ConfigError);
}

TEST(FeatureExtractor, SameSeedSameParameters) {
  const FeatureExtractor<float> a(FenConfig{16.0}, 9), b(FenConfig{16.0}, 9), c(FenConfig{16.0}, 10);
  EXPECT_EQ(params_to_json(a.params()), params_to_json(b.params()));
  EXPECT_NE(params_to_json(a.params()), params_to_json(c.params()));
}

TEST(FeatureExtractor, StageShapes) {
  const FeatureExtractor<float> net(FenConfig{16.0}, 1);
  const auto maps = net.extract(noise(256, 256, 2));
  ASSERT_EQ(maps.stages.size(), 5u);
  EXPECT_EQ(maps.stages[4].shape(), (Shape{128, 8, 8}));
  for (std::size_t s = 0; s < 5; ++s) EXPECT_EQ(maps.stages[s].dim(1), 256u >> (s + 1));
}

TEST(FeatureExtractor, DoublingInputDoublesExtents) {
  const FeatureExtractor<float> net(FenConfig{16.0}, 1);
  const auto small = net.extract(noise(64, 96, 3)), big = net.extract(noise(128, 192, 3));
  for (std::size_t s = 0; s < 5; ++s) {
    EXPECT_EQ(big.stages[s].dim(1), 2 * small.stages[s].dim(1));
    EXPECT_EQ(big.stages[s].dim(2), 2 * small.stages[s].dim(2));
  }
}

TEST(FeatureExtractor, ZeroResidualPropagatesProjection) {
  FeatureExtractor<double> net(FenConfig{16.0}, 4);
  net.params().at(fen_name(0, "w")).values().assign(net.params().at(fen_name(0, "w")).numel(), 0.0);
  const auto img = noise(64, 64, 5);
  const auto c1 = net.extract(img).stages[0];
  const auto& proj = net.params().at(fen_name(0, "proj"));
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) EXPECT_NEAR(c1.at(c, y, x), proj[c] * img.at(2 * x, 2 * y), 1e-12);
}

TEST(FeatureExtractor, RejectsBadSizes) {
  const FeatureExtractor<float> net(FenConfig{16.0}, 1);
  EXPECT_THROW(net.extract(noise(16, 16, 1)), InputError);
  EXPECT_THROW(net.extract(noise(48, 64, 1)), InputError);
}
