#include <gtest/gtest.h>

#include <algorithm>

#include "tsnet/gradcheck.hpp"

namespace tsnet {
namespace {

TEST(GradCheckSuite, EveryOpPassesOnFreshBuild) {
  const GradCheckReport report = run_gradcheck_suite();
  bool has_model = false;
  for (const auto& e : report.entries) {
    EXPECT_EQ(e.trials, 20) << e.name;
    if (e.name == "two_stream_mtl_loss") {
      has_model = true;
      continue;
    }
    EXPECT_LT(e.max_rel_error, 1e-6) << e.name;
  }
  EXPECT_TRUE(has_model);
  EXPECT_GE(report.entries.size(), 15u);
}

// Over every coordinate of the full model a few conv weights have gradients
// near the eps = 1e-6 rounding floor, so only an upper bound is pinned here.
TEST(GradCheckSuite, ModelLossAgreesToRoundingFloor) {
  const GradCheckReport report = run_gradcheck_suite();
  const auto it = std::find_if(report.entries.begin(), report.entries.end(),
                               [](const GradCheckEntry& e) { return e.name == "two_stream_mtl_loss"; });
  ASSERT_NE(it, report.entries.end());
  EXPECT_LT(it->max_rel_error, 1e-5);
}

TEST(GradCheckSuite, ModelLossPassesWithCoarserStep) {
  GradCheckOptions opt;
  opt.eps = 1e-5;
  opt.trials = 5;
  const GradCheckReport report = run_gradcheck_suite(opt);
  for (const auto& e : report.entries) {
    if (e.name == "two_stream_mtl_loss") EXPECT_LT(e.max_rel_error, 1e-6);
  }
}

TEST(GradCheckSuite, SignFlippedConvGradientFails) {
  GradCheckOptions opt;
  opt.trials = 2;
  opt.conv = [](const Tensor& x, const Tensor& w, const Tensor& b, std::size_t s, std::size_t p) {
    return flip_gradient(conv2d(x, w, b, s, p));
  };
  const GradCheckReport report = run_gradcheck_suite(opt);
  EXPECT_FALSE(report.passed());
  for (const auto& e : report.entries) {
    if (e.name.rfind("conv2d", 0) == 0) {
      EXPECT_FALSE(e.passed) << e.name;
      EXPECT_GT(e.max_rel_error, 0.5);
    } else {
      EXPECT_TRUE(e.passed) << e.name;
    }
  }
}

}  // namespace
}  // namespace tsnet
