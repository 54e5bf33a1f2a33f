#include <gtest/gtest.h>

#include "sonoqa/oracles.hpp"
#include "sonoqa/random.hpp"
#include "sonoqa/selfcheck.hpp"

using namespace sonoqa;

TEST(Confusion, BalancedFixture) {
  std::vector<int> pred, truth;
  for (int i = 0; i < 20; ++i) {
    truth.push_back(i < 10 ? 1 : 0);
    pred.push_back(i < 5 || i >= 15 ? 1 : 0);
  }
  const auto c = confusion(pred, truth);
  EXPECT_EQ(c, (ConfusionCounts{5, 5, 5, 5}));
  for (const Rate& r : {accuracy(c), specificity(c), sensitivity(c), precision(c), f1(c)}) EXPECT_EQ(*r, 0.5);
}

TEST(Confusion, UndefinedRatesAreNull) {
  const auto c = confusion({0, 0}, {0, 0});
  EXPECT_EQ(*accuracy(c), 1.0);
  EXPECT_EQ(*specificity(c), 1.0);
  EXPECT_FALSE(sensitivity(c));
  EXPECT_FALSE(precision(c));
  EXPECT_FALSE(f1(c));
  EXPECT_TRUE(confusion_json(c).at("sen").is_null());
  EXPECT_FALSE(f1(confusion({0}, {1})));  // precision undefined
  EXPECT_THROW(confusion({1}, {1, 0}), InputError);
}

TEST(Auc, Examples) {
  EXPECT_EQ(roc_auc({0.9, 0.4, 0.6}, {1, 0, 0}).auc, 1.0);
  EXPECT_EQ(roc_auc({0.1, 0.9}, {1, 0}).auc, 0.0);
  EXPECT_EQ(roc_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}).auc, 0.5);
  EXPECT_EQ(roc_auc({0.8, 0.6, 0.7, 0.2}, {1, 1, 0, 0}).auc, 0.75);
  EXPECT_THROW(roc_auc({0.1, 0.2}, {1, 1}), InputError);
}

TEST(Auc, CurveRunsFromOriginToOne) {
  const auto r = roc_auc({0.3, 0.1, 0.9, 0.3}, {1, 0, 0, 1});
  EXPECT_EQ(r.curve.front().fpr, 0.0);
  EXPECT_EQ(r.curve.front().tpr, 0.0);
  EXPECT_EQ(r.curve.back().fpr, 1.0);
  EXPECT_EQ(r.curve.back().tpr, 1.0);
  for (std::size_t i = 1; i < r.curve.size(); ++i) {
    EXPECT_GE(r.curve[i].fpr, r.curve[i - 1].fpr);
    EXPECT_GE(r.curve[i].tpr, r.curve[i - 1].tpr);
  }
}

TEST(Auc, MatchesPairCountOracle) {
  for (std::uint64_t k = 0; k < 300; ++k) {
    Rng rng(k);
    const std::size_t n = 2 + rng.below(40);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t j = 0; j < n; ++j) {
      s[j] = rng.uniform() < 0.5 ? static_cast<double>(rng.below(5)) : rng.uniform();
      y[j] = static_cast<int>(rng.below(2));
    }
    y[0] = 1, y[n - 1] = 0;
    EXPECT_EQ(roc_auc(s, y).auc, oracle::auc_pairs(s, y));
  }
}

TEST(AveragePrecision, TwoTruthExample) {
  const std::vector<TruthBox> gts{{0, 0, {0, 0, 10, 10}}, {0, 0, {20, 20, 30, 30}}};
  const std::vector<ScoredBox> dets{{0, 0, {0, 0, 10, 10}, 0.9}, {0, 0, {50, 50, 60, 60}, 0.8},
                                    {0, 0, {20, 20, 30, 30}, 0.7}};
  EXPECT_NEAR(average_precision(dets, gts), 0.5 + 0.5 * 2.0 / 3.0, 1e-15);
}

TEST(AveragePrecision, EdgeCases) {
  const std::vector<TruthBox> gt{{0, 0, {0, 0, 10, 10}}};
  EXPECT_EQ(average_precision({}, gt), 0.0);
  EXPECT_EQ(average_precision({{0, 0, {0, 0, 10, 10}, 0.3}}, gt), 1.0);
  EXPECT_EQ(average_precision({{1, 0, {0, 0, 10, 10}, 0.3}}, gt), 0.0);  // other image
  // duplicate detection: the second is a false positive after the true one
  EXPECT_EQ(average_precision({{0, 0, {0, 0, 10, 10}, 0.9}, {0, 0, {0, 0, 10, 10}, 0.8}}, gt), 1.0);
  // IoU exactly 0.5 is not a match
  EXPECT_EQ(average_precision({{0, 0, {0, 0, 10, 5}, 0.9}}, gt), 0.0);
  EXPECT_THROW(average_precision({}, {}), InputError);
}

TEST(AveragePrecision, TiedScoresFormOnePoint) {
  // one hit and one miss at the same score: precision 1/2 at recall 1
  const std::vector<TruthBox> gt{{0, 0, {0, 0, 10, 10}}};
  const std::vector<ScoredBox> a{{0, 0, {50, 50, 60, 60}, 0.5}, {0, 0, {0, 0, 10, 10}, 0.5}};
  const std::vector<ScoredBox> b{{0, 0, {0, 0, 10, 10}, 0.5}, {0, 0, {50, 50, 60, 60}, 0.5}};
  EXPECT_EQ(average_precision(a, gt), 0.5);
  EXPECT_EQ(average_precision(b, gt), 0.5);
}

TEST(AveragePrecision, MatchesThresholdSweepOracle) {
  for (std::uint64_t k = 0; k < 1000; ++k) {
    Rng rng(1000 + k);
    const auto [dets, gts] = random_ap_instance(rng);
    EXPECT_EQ(average_precision(dets, gts), oracle::average_precision(dets, gts, 0.5)) << "instance " << k;
  }
}

TEST(MeanAp, SkipsClassesWithoutTruth) {
  const std::vector<TruthBox> gts{{0, 0, {0, 0, 10, 10}}, {0, 2, {0, 0, 10, 10}}};
  const std::vector<ScoredBox> dets{{0, 0, {0, 0, 10, 10}, 0.9}, {0, 1, {0, 0, 10, 10}, 0.9}};
  const auto r = mean_ap(dets, gts, 3, 0.5, ApInterpolation::kAllPoint, {"A", "B", "C"});
  ASSERT_EQ(r.per_class.size(), 3u);
  EXPECT_EQ(*r.per_class[0], 1.0);
  EXPECT_FALSE(r.per_class[1]);
  EXPECT_EQ(*r.per_class[2], 0.0);
  EXPECT_EQ(*r.map, 0.5);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("B"), std::string::npos);
  EXPECT_FALSE(mean_ap(dets, {}, 2).map);
}

TEST(Quartiles, Examples) {
  const auto b = iou_quartiles({4, 1, 3, 2});
  EXPECT_EQ(b.min, 1.0);
  EXPECT_EQ(b.q1, 1.75);
  EXPECT_EQ(b.median, 2.5);
  EXPECT_EQ(b.q3, 3.25);
  EXPECT_EQ(b.max, 4.0);
  const auto one = iou_quartiles({0.7});
  EXPECT_EQ(one.q1, 0.7);
  EXPECT_EQ(one.q3, 0.7);
  EXPECT_THROW(iou_quartiles({}), InputError);
}
