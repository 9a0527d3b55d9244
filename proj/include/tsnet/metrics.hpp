#pragma once

#include <Eigen/Core>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tsnet/error.hpp"

namespace tsnet {

/// Whiteness of the human driver on the reference test set, for display.
inline constexpr double kHumanWhiteness = 4.36;

/// Root mean squared difference of two equal-length series.
template <class A, class B>
double rmse(const Eigen::DenseBase<A>& pred, const Eigen::DenseBase<B>& truth) {
  if (pred.size() != truth.size()) {
    throw UsageError("rmse: length mismatch " + std::to_string(pred.size()) + " vs " + std::to_string(truth.size()));
  }
  if (pred.size() == 0) throw UsageError("rmse: empty series");
  const auto diff = pred.derived().template cast<double>().array() - truth.derived().template cast<double>().array();
  return std::sqrt(diff.square().mean());
}

/// Squared forward differences ((P[i+1] - P[i]) / dt)^2, length size - 1.
template <class A>
Eigen::ArrayXd instantaneous_whiteness(const Eigen::DenseBase<A>& series, double dt) {
  if (series.size() < 2) throw UsageError("whiteness: need at least two samples");
  if (!(dt > 0.0)) throw UsageError("whiteness: dt must be positive");
  const Eigen::ArrayXd p = series.derived().template cast<double>().array();
  const Eigen::Index d = p.size() - 1;
  return ((p.tail(d) - p.head(d)) / dt).square();
}

/// sqrt(mean of squared forward differences): RMS of the discrete derivative,
/// in series units per second.
template <class A>
double whiteness(const Eigen::DenseBase<A>& series, double dt) {
  return std::sqrt(instantaneous_whiteness(series, dt).mean());
}

inline Eigen::Map<const Eigen::ArrayXd> as_array(std::span<const double> v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}

struct EvalReport {
  double rmse_deg = 0.0;
  double whiteness = 0.0;
  std::size_t n_samples = 0;
  double dt = 0.1;
  double reference_human_whiteness = kHumanWhiteness;
  std::string scatter_path;
  std::vector<std::size_t> t;
  std::vector<double> predicted;
  std::vector<double> truth;

  nlohmann::json to_json() const {
    return {{"rmse_deg", rmse_deg},
            {"whiteness", whiteness},
            {"whiteness_unit", "deg/s"},
            {"n_samples", n_samples},
            {"dt", dt},
            {"reference_human_whiteness", reference_human_whiteness},
            {"scatter_path", scatter_path}};
  }
};

/// Scores an ordered prediction series against the truth.
EvalReport evaluate_series(std::vector<std::size_t> t, std::vector<double> predicted, std::vector<double> truth,
                           double dt);

/// Runs `model.predict` over the ordered test samples and scores y_main
/// against target_main. Works for any model exposing
/// `std::vector<double> predict(std::span<const Sample>, std::size_t)`.
template <class Model, class SampleT>
EvalReport evaluate(const Model& model, std::span<const SampleT> samples, double dt) {
  if (samples.empty()) throw UsageError("evaluate: empty test set");
  std::vector<std::size_t> t;
  std::vector<double> truth;
  for (const auto& s : samples) {
    t.push_back(s.t);
    truth.push_back(s.target_main);
  }
  return evaluate_series(std::move(t), model.predict(samples, 64), std::move(truth), dt);
}

/// CSV `t,angle_pred_deg,angle_true_deg,inst_whiteness`, one row per
/// derivative: row i pairs P[i] with ((P[i+1] - P[i]) / dt)^2.
void write_scatter_csv(const std::filesystem::path& path, const EvalReport& report);

}  // namespace tsnet
