#include <gtest/gtest.h>

#include "sonoqa/selfcheck.hpp"

using namespace sonoqa;

TEST(Selfcheck, EveryCheckPasses) {
  const auto results = run_selfcheck(SelfcheckOptions{});
  ASSERT_EQ(results.size(), 6u);
  for (const auto& r : results) EXPECT_TRUE(r.passed) << r.name << ": " << r.detail;
}

TEST(Selfcheck, GradientCasesCoverTheDifferentiableOps) {
  std::vector<std::string> ops;
  for (const auto& c : gradient_cases()) ops.push_back(c.op);
  for (const char* want : {"conv2d", "relu", "global_avg_pool", "spp", "relation_module", "focal_loss", "total_loss"})
    EXPECT_NE(std::find(ops.begin(), ops.end(), want), ops.end()) << want;
}

TEST(Selfcheck, WrongApInterpolationIsCaught) {
  const auto r = check_metric_oracles(2024, ApInterpolation::kElevenPoint, 200);
  EXPECT_FALSE(r.passed);
  SelfcheckOptions o;
  o.ap_interpolation = ApInterpolation::kElevenPoint;
  bool any_failed = false;
  for (const auto& c : run_selfcheck(o)) any_failed |= !c.passed;
  EXPECT_TRUE(any_failed);
}

TEST(Selfcheck, OtherSeedsAlsoPass) {
  for (std::uint64_t seed : {1u, 99u}) {
    EXPECT_TRUE(check_gradients(seed, 3).passed);
    EXPECT_TRUE(check_relation_normalization(seed, 200).passed);
    EXPECT_TRUE(check_metric_oracles(seed, ApInterpolation::kAllPoint, 200).passed);
  }
}
