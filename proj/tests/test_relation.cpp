#include <gtest/gtest.h>

#include <cmath>

#include "sonoqa/random.hpp"
#include "sonoqa/relation.hpp"

using namespace sonoqa;

namespace {

Tensor<double> randn(Shape s, Rng& rng) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

Tensor<double> identity(std::size_t n) {
  Tensor<double> t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

RoiFeatureSet random_set(std::size_t n, std::size_t d_f, Rng& rng) {
  RoiFeatureSet s;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> f(d_f);
    for (auto& v : f) v = rng.normal();
    s.appearance.push_back(f);
    s.geometry.push_back({rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(4, 30), rng.uniform(4, 30)});
  }
  return s;
}

}  // namespace

TEST(Geometry, CoincidentBoxes) {
  const BoxGeometry b{10, 20, 8, 6};
  const auto raw = geometry_raw(b, b, 1e-3);
  EXPECT_DOUBLE_EQ(raw[0], std::log(1e-3));
  EXPECT_DOUBLE_EQ(raw[1], std::log(1e-3));
  EXPECT_EQ(raw[2], 0.0);
  EXPECT_EQ(raw[3], 0.0);
}

TEST(Geometry, TranslationAndScaleInvariant) {
  const BoxGeometry m{10, 20, 8, 6}, n{30, 5, 12, 9};
  const auto e = geometric_embed(m, n, 32);
  const auto t = geometric_embed({20, 30, 8, 6}, {40, 15, 12, 9}, 32);
  const auto s = geometric_embed({20, 40, 16, 12}, {60, 10, 24, 18}, 32);
  for (std::size_t i = 0; i < e.size(); ++i) {
    EXPECT_NEAR(t[i], e[i], 1e-12);
    EXPECT_NEAR(s[i], e[i], 1e-12);
  }
}

TEST(Geometry, EmbeddingDimensionMustDivideByEight) {
  EXPECT_THROW(geometric_embed({0, 0, 1, 1}, {1, 1, 1, 1}, 12), ConfigError);
  EXPECT_THROW(geometry_raw({0, 0, 0, 1}, {1, 1, 1, 1}), InputError);
}

TEST(GeometryWeight, ZeroClampedAndPassThrough) {
  RelationParams p;
  p.wg = Tensor<double>({2, 1});
  EXPECT_EQ(geometry_weight(p, {0.3, -0.4}), 0.0);
  p.wg = Tensor<double>({2, 1}, {1.0, 2.0});
  EXPECT_EQ(geometry_weight(p, {1.0, -2.0}), 0.0);  // -3 clamps
  EXPECT_EQ(geometry_weight(p, {0.5, 1.0}), 2.5);
}

TEST(AppearanceWeight, ScaledDotProduct) {
  RelationParams p;
  p.wk = identity(4);
  p.wq = identity(4);
  const std::vector<double> e0{1, 0, 0, 0};
  EXPECT_DOUBLE_EQ(appearance_weight(e0, e0, p, 4), 0.5);
  EXPECT_EQ(appearance_weight({0, 0, 0, 0}, e0, p, 4), 0.0);
  Rng rng(31);
  p.wk = randn({4, 4}, rng);
  p.wq = randn({4, 4}, rng);
  const std::vector<double> a{0.3, -1, 2, 0.5}, b{1, 1, -0.2, 0.7};
  std::vector<double> a3 = a;
  for (auto& v : a3) v *= 3.0;
  EXPECT_NEAR(appearance_weight(a3, b, p, 4), 3.0 * appearance_weight(a, b, p, 4), 1e-12);
}

TEST(RelationSoftmax, HandExamples) {
  Tape<double> t;
  const auto one = ag::relation_softmax(t.constant(Tensor<double>({1, 1}, 0.7)), t.constant(Tensor<double>({1, 1}, -2.0)), 1e-6);
  EXPECT_DOUBLE_EQ(one.value()[0], 1.0);

  const auto sym = ag::relation_softmax(t.constant(Tensor<double>({2, 2}, 0.4)), t.constant(Tensor<double>({2, 2}, 0.1)), 1e-6);
  for (double v : sym.value().values()) EXPECT_DOUBLE_EQ(v, 0.5);

  const double ln3 = std::log(3.0);
  const auto w = ag::relation_softmax(t.constant(Tensor<double>({2, 2}, 1.0)),
                                      t.constant(Tensor<double>({2, 2}, {0, 0, ln3, ln3})), 1e-6);
  EXPECT_NEAR(w.value().at(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(w.value().at(1, 0), 0.75, 1e-15);
}

TEST(RelationSoftmax, DegenerateColumnIsUniform) {
  Tape<double> t;
  const auto wg = t.leaf(Tensor<double>({3, 3}, {0, 1, 0, 0, 1, 0, 0, 1, 0}));
  const auto wa = t.leaf(Tensor<double>({3, 3}));
  const auto w = ag::relation_softmax(wg, wa, 1e-6);
  for (std::size_t m = 0; m < 3; ++m) {
    EXPECT_DOUBLE_EQ(w.value().at(m, 0), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(w.value().at(m, 1), 1.0 / 3.0);
  }
  t.backward(ag::sum(ag::mul(w, t.constant(Tensor<double>({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9})))));
  for (std::size_t m = 0; m < 3; ++m) EXPECT_EQ(t.grad(wa).at(m, 0), 0.0);
}

TEST(RelationWeights, MatchDirectScalarEvaluation) {
  RelationConfig cfg;
  cfg.d_f = 6, cfg.d_k = 3, cfg.d_g = 16;
  Rng rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(6);
    const auto set = random_set(n, cfg.d_f, rng);
    const RelationParams p{randn({cfg.d_g, 1}, rng), randn({cfg.d_f, cfg.d_k}, rng), randn({cfg.d_f, cfg.d_k}, rng),
                           randn({cfg.d_f, cfg.d_f}, rng)};
    const auto w = relation_weights(set, p, cfg);
    for (std::size_t col = 0; col < n; ++col) {
      std::vector<double> num(n);
      double den = 0.0;
      for (std::size_t m = 0; m < n; ++m) {
        num[m] = geometry_weight(p, geometric_embed(set.geometry[m], set.geometry[col], cfg.d_g)) *
                 std::exp(appearance_weight(set.appearance[m], set.appearance[col], p, cfg.d_k));
        den += num[m];
      }
      for (std::size_t m = 0; m < n; ++m) {
        const double expect = den < cfg.epsilon_norm ? 1.0 / static_cast<double>(n) : num[m] / den;
        EXPECT_NEAR(w.at(m, col), expect, 1e-10);
      }
    }
  }
}

TEST(RelationWeights, ColumnsAreDistributions) {
  RelationConfig cfg;
  cfg.d_f = 5, cfg.d_k = 2, cfg.d_g = 8;
  Rng rng(33);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    const auto set = random_set(n, cfg.d_f, rng);
    RelationParams p{randn({cfg.d_g, 1}, rng), randn({cfg.d_f, cfg.d_k}, rng), randn({cfg.d_f, cfg.d_k}, rng),
                     randn({cfg.d_f, cfg.d_f}, rng)};
    if (trial % 4 == 0) p.wg = Tensor<double>({cfg.d_g, 1});
    const auto w = relation_weights(set, p, cfg);
    for (std::size_t col = 0; col < n; ++col) {
      double s = 0.0;
      for (std::size_t m = 0; m < n; ++m) {
        EXPECT_GE(w.at(m, col), 0.0);
        s += w.at(m, col);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(RelationFeatures, FusionExamples) {
  Rng rng(34);
  RelationParams p;
  p.wv = Tensor<double>({3, 3});
  RoiFeatureSet two = random_set(2, 3, rng);
  const Tensor<double> uniform({2, 2}, 0.5);
  auto out = relation_features(two, uniform, p);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(out[i], two.appearance[i]);  // zero value map

  p.wv = identity(3);
  RoiFeatureSet one = random_set(1, 3, rng);
  out = relation_features(one, Tensor<double>({1, 1}, 1.0), p);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out[0][j], 2.0 * one.appearance[0][j], 1e-15);

  out = relation_features(two, uniform, p);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      EXPECT_NEAR(out[i][j] - two.appearance[i][j], 0.5 * (two.appearance[0][j] + two.appearance[1][j]), 1e-15);

  EXPECT_THROW(relation_features(two, Tensor<double>({2, 2}, 0.3), p), InputError);
}
