#include <gtest/gtest.h>

#include <cmath>

#include "sonoqa/detector.hpp"
#include "sonoqa/oracles.hpp"
#include "sonoqa/random.hpp"

using namespace sonoqa;

TEST(Iou, Examples) {
  const Box a{0, 0, 2, 2};
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, Box{5, 5, 6, 6}), 0.0);
  EXPECT_EQ(iou(a, Box{2, 0, 4, 2}), 0.0);  // touching edges
  EXPECT_EQ(iou(a, Box{1, 1, 3, 3}), 1.0 / 7.0);
}

TEST(Iou, MatchesRationalOracleOnIntegerBoxes) {
  Rng rng(41);
  for (int i = 0; i < 2000; ++i) {
    std::int64_t c[8];
    for (auto& v : c) v = static_cast<std::int64_t>(rng.below(12));
    if (c[2] <= c[0] || c[3] <= c[1] || c[6] <= c[4] || c[7] <= c[5]) continue;
    const auto q = oracle::iou_rational(c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]);
    const double v = iou(Box{double(c[0]), double(c[1]), double(c[2]), double(c[3])},
                         Box{double(c[4]), double(c[5]), double(c[6]), double(c[7])});
    EXPECT_NEAR(v, static_cast<double>(q.num) / static_cast<double>(q.den), 1e-15);
  }
}

TEST(Anchors, PerLevelCountsAndTotal) {
  const auto anchors = generate_anchors(256, 256, FpnConfig{});
  std::size_t level3 = 0;
  for (const auto& a : anchors) level3 += a.level == 3 ? 1 : 0;
  EXPECT_EQ(level3, 32u * 32u * 3u);
  // 3 * (32^2 + 16^2 + 8^2 + 4^2 + 2^2)
  EXPECT_EQ(anchors.size(), 3u * (1024 + 256 + 64 + 16 + 4));
  EXPECT_EQ(generate_anchors(128, 128, FpnConfig{}).size(), 3u * (256 + 64 + 16 + 4 + 1));
}

TEST(Anchors, SizesFollowTheLevelTable) {
  const FpnConfig cfg;
  const std::size_t expect_stride[] = {8, 16, 32, 64, 128};
  const double expect_size[] = {32, 64, 128, 256, 512};
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(cfg.levels[i].level, static_cast<int>(i) + 3);
    EXPECT_EQ(cfg.levels[i].stride, expect_stride[i]);
    EXPECT_EQ(cfg.levels[i].size, expect_size[i]);
  }
  // an unclipped ratio-1 anchor at level 5 is 128 x 128
  const auto anchors = generate_anchors(512, 512, cfg);
  bool found = false;
  for (const auto& a : anchors)
    if (a.level == 5 && a.box.cx() == 240.0 && a.box.cy() == 240.0 && a.box.width() == a.box.height()) {
      EXPECT_EQ(a.box.width(), 128.0);
      found = true;
    }
  EXPECT_TRUE(found);
}

TEST(Anchors, AspectRatiosPreserveArea) {
  for (const auto& a : generate_anchors(1024, 1024, FpnConfig{}))
    if (a.level == 4 && a.box.cx() == 504.0 && a.box.cy() == 504.0) {
      EXPECT_NEAR(a.box.area(), 64.0 * 64.0, 1e-9);
    }
}

TEST(Assign, ExactMatchAndEmptyTruth) {
  const std::vector<Box> anchors{{0, 0, 10, 10}, {20, 20, 30, 30}};
  auto as = assign(anchors, {{0, 0, 10, 10}});
  EXPECT_TRUE(as[0].positive);
  EXPECT_EQ(as[0].max_iou, 1.0);
  EXPECT_FALSE(as[1].positive);
  for (const auto& a : assign(anchors, {})) EXPECT_FALSE(a.positive);
}

TEST(Assign, IouExactlyHalfIsNegative) {
  // anchor 1 overlaps the gt with IoU exactly 1/2; anchor 0 is the gt's best match
  const std::vector<Box> anchors{{0, 0, 4, 4}, {0, 0, 4, 2}};
  ASSERT_EQ(iou(anchors[1], Box{0, 0, 4, 4}), 0.5);
  const auto as = assign(anchors, {{0, 0, 4, 4}});
  EXPECT_TRUE(as[0].positive);
  EXPECT_FALSE(as[1].positive);
}

TEST(Assign, BestAnchorIsForcedPositive) {
  const std::vector<Box> anchors{{0, 0, 4, 4}, {100, 100, 110, 110}};
  const auto as = assign(anchors, {{0, 0, 4, 12}});  // IoU 1/3
  EXPECT_TRUE(as[0].positive);
  EXPECT_TRUE(as[0].forced);
  EXPECT_EQ(as[0].matched, 0);
}

TEST(BoxCoding, Examples) {
  const Box a{10, 10, 20, 30};
  const auto d0 = encode_box(a, a);
  EXPECT_EQ(d0.dx, 0.0);
  EXPECT_EQ(d0.dy, 0.0);
  EXPECT_EQ(d0.dw, 0.0);
  EXPECT_EQ(d0.dh, 0.0);
  const auto d = encode_box(Box{5, 10, 25, 30}, a);
  EXPECT_NEAR(d.dw, std::log(2.0), 1e-15);
  EXPECT_EQ(d.dh, 0.0);
}

TEST(BoxCoding, RoundTrip) {
  Rng rng(42);
  for (int i = 0; i < 1000; ++i) {
    const Box anchor{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(60, 120), rng.uniform(60, 120)};
    const Box gt{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(60, 120), rng.uniform(60, 120)};
    const Box back = decode_box(encode_box(gt, anchor), anchor);
    EXPECT_NEAR(back.x_min, gt.x_min, 1e-9);
    EXPECT_NEAR(back.y_min, gt.y_min, 1e-9);
    EXPECT_NEAR(back.x_max, gt.x_max, 1e-9);
    EXPECT_NEAR(back.y_max, gt.y_max, 1e-9);
  }
}

TEST(Nms, Examples) {
  const Box a{0, 0, 10, 10};
  auto kept = nms({{a, 3, 0.8, 1}, {a, 3, 0.9, 0}});
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].score, 0.9);

  kept = nms({{{0, 0, 1, 1}, 3, 0.1, 0}, {{5, 5, 6, 6}, 3, 0.9, 1}});
  EXPECT_EQ(kept.size(), 2u);

  // A~B~C with A, C disjoint. Jaccard distance obeys the triangle inequality,
  // so such a chain only exists for thresholds below 1/2.
  const Box A{0, 0, 10, 10}, B{5, 0, 15, 10}, C{10, 0, 20, 10};
  ASSERT_GT(iou(A, B), 0.3);
  ASSERT_GT(iou(B, C), 0.3);
  ASSERT_EQ(iou(A, C), 0.0);
  kept = nms({{C, 3, 0.7, 2}, {A, 3, 0.9, 0}, {B, 3, 0.8, 1}}, 0.3);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].box, A);
  EXPECT_EQ(kept[1].box, C);
}

TEST(Nms, TiesPreferSmallerAnchorIndex) {
  const Box a{0, 0, 10, 10};
  const auto kept = nms({{a, 3, 0.5, 7}, {a, 3, 0.5, 2}});
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].anchor, 2u);
}

TEST(Propose, ZeroHeadReturnsAnchorsInOrder) {
  const auto anchors = generate_anchors(64, 64, FpnConfig{});
  Tape<double> t;
  RpnOutputs<double> rpn{{}, t.constant(Tensor<double>({anchors.size()})), t.constant(Tensor<double>({anchors.size(), 4}))};
  DetectorConfig cfg;
  cfg.top_k = 5;
  cfg.nms_iou = 0.99;
  const auto props = propose(rpn, anchors, 64, 64, cfg);
  ASSERT_EQ(props.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(props[i].score, 0.5);
    EXPECT_EQ(props[i].box, anchors[props[i].anchor].box);
  }
}

TEST(Propose, TopOneIsTheBestScore) {
  const auto anchors = generate_anchors(64, 64, FpnConfig{});
  Rng rng(43);
  Tensor<double> obj({anchors.size()});
  for (auto& v : obj.values()) v = rng.normal();
  std::size_t best = 0;
  for (std::size_t i = 1; i < obj.numel(); ++i)
    if (obj[i] > obj[best]) best = i;
  Tape<double> t;
  RpnOutputs<double> rpn{{}, t.constant(obj), t.constant(Tensor<double>({anchors.size(), 4}))};
  DetectorConfig cfg;
  cfg.top_k = 1;
  const auto props = propose(rpn, anchors, 64, 64, cfg);
  ASSERT_EQ(props.size(), 1u);
  EXPECT_EQ(props[0].anchor, best);
}
