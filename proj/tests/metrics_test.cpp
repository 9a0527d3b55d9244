#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "tsnet/metrics.hpp"
#include "tsnet/dataset.hpp"

namespace tsnet {
namespace {

Eigen::ArrayXd sinusoid(double amplitude, double omega, double dt, double seconds) {
  const auto n = static_cast<Eigen::Index>(std::llround(seconds / dt)) + 1;
  Eigen::ArrayXd p(n);
  for (Eigen::Index i = 0; i < n; ++i) p[i] = amplitude * std::sin(omega * static_cast<double>(i) * dt);
  return p;
}

TEST(Rmse, HandValues) {
  Eigen::ArrayXd p(2), t(2);
  p << 0, 0;
  t << 3, 4;
  EXPECT_NEAR(rmse(p, t), 3.5355, 1e-4);
  EXPECT_EQ(rmse(p, t), rmse(t, p));
  EXPECT_EQ(rmse(t, t), 0.0);
}

TEST(Rmse, RejectsBadLengths) {
  EXPECT_THROW(rmse(Eigen::ArrayXd(2), Eigen::ArrayXd(3)), UsageError);
  EXPECT_THROW(rmse(Eigen::ArrayXd(0), Eigen::ArrayXd(0)), UsageError);
}

TEST(Rmse, AcceptsVectorsAndExpressions) {
  Eigen::VectorXf p = Eigen::VectorXf::Constant(4, 1.0f);
  Eigen::VectorXd t = Eigen::VectorXd::Zero(4);
  EXPECT_EQ(rmse(p, t), 1.0);
  EXPECT_EQ(rmse(2.0 * t, t + t), 0.0);
}

TEST(Whiteness, ConstantIsZero) {
  EXPECT_EQ(whiteness(Eigen::ArrayXd::Constant(10, 7.5), 0.1), 0.0);
  EXPECT_TRUE((instantaneous_whiteness(Eigen::ArrayXd::Constant(5, -2.0), 0.1) == 0.0).all());
}

TEST(Whiteness, LinearRamp) {
  Eigen::ArrayXd p(4);
  p << 0, 1, 2, 3;
  EXPECT_EQ(whiteness(p, 0.1), 10.0);
}

TEST(Whiteness, SinusoidMatchesDiscreteRms) {
  const double a = 30.0, omega = M_PI, dt = 0.1;
  const double analytic = a * (2.0 * std::sin(omega * dt / 2.0) / dt) / std::sqrt(2.0);
  EXPECT_NEAR(analytic, 66.3, 0.1);
  for (double periods : {1.0, 2.0, 5.0}) {
    const double w = whiteness(sinusoid(a, omega, dt, 2.0 * periods), dt);
    EXPECT_NEAR(w, analytic, 0.02 * analytic) << periods;
    EXPECT_NEAR(w, 66.3, 0.02 * 66.3);
  }
}

TEST(Whiteness, OffsetInvarianceAndHomogeneity) {
  tsnet::Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::ArrayXd p(50);
    for (auto& v : p) v = rng.uniform(-20, 20);
    const double w = whiteness(p, 0.1);
    const double c = rng.uniform(-100, 100), alpha = rng.uniform(-3, 3);
    EXPECT_NEAR(whiteness(p + c, 0.1), w, 1e-12 * std::max(1.0, w));
    EXPECT_NEAR(whiteness(alpha * p, 0.1), std::abs(alpha) * w, 1e-12 * std::max(1.0, w));
  }
}

TEST(Whiteness, ResamplingScalesWithRate) {
  const double a = 10.0, omega = 0.5;
  const double w1 = whiteness(sinusoid(a, omega, 0.01, 4 * M_PI), 0.01);
  const double w2 = whiteness(sinusoid(a, omega, 0.005, 4 * M_PI), 0.005);
  EXPECT_NEAR(w1, a * omega / std::sqrt(2.0), 1e-3 * w1);
  EXPECT_NEAR(w1, w2, 1e-3 * w1);
}

TEST(InstantaneousWhiteness, HandValueAndIdentity) {
  Eigen::ArrayXd p(2);
  p << 0, 1;
  const Eigen::ArrayXd w = instantaneous_whiteness(p, 0.1);
  ASSERT_EQ(w.size(), 1);
  EXPECT_NEAR(w[0], 100.0, 1e-12);
  tsnet::Rng rng(2);
  Eigen::ArrayXd q(30);
  for (auto& v : q) v = rng.uniform(-5, 5);
  EXPECT_NEAR(instantaneous_whiteness(q, 0.1).mean(), std::pow(whiteness(q, 0.1), 2), 1e-12 * whiteness(q, 0.1) * whiteness(q, 0.1));
}

TEST(Whiteness, RejectsShortSeriesAndBadDt) {
  EXPECT_THROW(whiteness(Eigen::ArrayXd::Zero(1), 0.1), UsageError);
  EXPECT_THROW(whiteness(Eigen::ArrayXd::Zero(3), 0.0), UsageError);
}

struct Oracle {
  std::vector<double> predict(std::span<const Sample> s, std::size_t) const {
    std::vector<double> out;
    for (const auto& x : s) out.push_back(x.target_main);
    return out;
  }
};

struct ConstantModel {
  double c;
  std::vector<double> predict(std::span<const Sample> s, std::size_t) const { return std::vector<double>(s.size(), c); }
};

std::vector<Sample> series(const std::vector<double>& angles) {
  std::vector<Sample> out(angles.size());
  for (std::size_t i = 0; i < angles.size(); ++i) {
    out[i].t = i + 1;
    out[i].target_main = angles[i];
  }
  return out;
}

TEST(Evaluate, PerfectOracle) {
  const std::vector<double> truth = {0.5, 1.5, -2.0, 0.25, 3.0};
  const auto s = series(truth);
  const EvalReport r = evaluate(Oracle{}, std::span<const Sample>(s), 0.1);
  EXPECT_EQ(r.rmse_deg, 0.0);
  EXPECT_EQ(r.whiteness, whiteness(as_array(truth), 0.1));
  EXPECT_EQ(r.n_samples, 5u);
  EXPECT_EQ(r.reference_human_whiteness, 4.36);
  EXPECT_EQ(r.to_json()["reference_human_whiteness"], 4.36);
}

TEST(Evaluate, ConstantPredictor) {
  const std::vector<double> truth = {1, 3, 5, 7};
  const auto s = series(truth);
  const EvalReport r = evaluate(ConstantModel{4.0}, std::span<const Sample>(s), 0.1);
  EXPECT_EQ(r.whiteness, 0.0);
  EXPECT_EQ(r.rmse_deg, std::sqrt((9.0 + 1.0 + 1.0 + 9.0) / 4.0));
}

TEST(Evaluate, EmptyRejected) {
  EXPECT_THROW(evaluate(Oracle{}, std::span<const Sample>(), 0.1), UsageError);
}

TEST(Evaluate, ScatterHasOneRowPerDerivative) {
  testing::TempDir dir("scatter");
  const auto s = series({0, 1, 1, 3});
  const EvalReport r = evaluate(Oracle{}, std::span<const Sample>(s), 0.1);
  write_scatter_csv(dir / "scatter.csv", r);
  EXPECT_EQ(read_file(dir / "scatter.csv"),
            "t,angle_pred_deg,angle_true_deg,inst_whiteness\n"
            "1,0,0,100\n"
            "2,1,1,0\n"
            "3,1,1,400\n");
}

}  // namespace
}  // namespace tsnet
