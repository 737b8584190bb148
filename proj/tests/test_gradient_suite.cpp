#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace transadapter;

TEST(GradientSuite, EveryCasePassesAtDefaultTolerance) {
  GradSuiteReport r = run_gradient_suite();
  ASSERT_GE(r.cases.size(), 40u);
  for (const auto &c : r.cases) {
    EXPECT_TRUE(c.passed) << c.name << " max_rel_err=" << c.max_rel_error;
    EXPECT_EQ(c.seeds, kGradSeeds) << c.name;
    EXPECT_GT(c.checked, 0u) << c.name;
  }
  EXPECT_GE(kGradSeeds, 20u);
  EXPECT_LT(r.seconds, 60.0);
}

TEST(GradientSuite, CoversEveryModule) {
  GradSuiteReport r = run_gradient_suite(1);
  std::vector<std::string> names;
  for (const auto &c : r.cases)
    names.push_back(c.name);
  for (const char *want : {"matmul", "softmax", "layer_norm", "partition_windows", "mada_block", "gdd_forward",
                           "cross_feature_transform", "focal_loss", "total_loss", "patch_embed", "end_to_end"})
    EXPECT_NE(std::find(names.begin(), names.end(), want), names.end()) << want;
}

TEST(GradientSuite, FilterAndZeroToleranceFail) {
  GradSuiteReport r = run_gradient_suite(2, 0.0, 1e-5, "softmax");
  ASSERT_FALSE(r.cases.empty());
  for (const auto &c : r.cases)
    EXPECT_NE(c.name.find("softmax"), std::string::npos);
  EXPECT_FALSE(r.passed());
}
