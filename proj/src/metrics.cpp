#include "tsnet/metrics.hpp"

#include <fstream>

#include "tsnet/dataset.hpp"

namespace tsnet {

EvalReport evaluate_series(std::vector<std::size_t> t, std::vector<double> predicted, std::vector<double> truth,
                           double dt) {
  if (predicted.size() != truth.size() || t.size() != truth.size()) {
    throw UsageError("evaluate: prediction and truth lengths differ");
  }
  EvalReport r;
  r.rmse_deg = rmse(as_array(predicted), as_array(truth));
  r.whiteness = whiteness(as_array(predicted), dt);
  r.n_samples = predicted.size();
  r.dt = dt;
  r.t = std::move(t);
  r.predicted = std::move(predicted);
  r.truth = std::move(truth);
  return r;
}

void write_scatter_csv(const std::filesystem::path& path, const EvalReport& report) {
  const Eigen::ArrayXd inst = instantaneous_whiteness(as_array(report.predicted), report.dt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "t,angle_pred_deg,angle_true_deg,inst_whiteness\n";
  for (Eigen::Index i = 0; i < inst.size(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    out << report.t[k] << ',' << shortest_repr(report.predicted[k]) << ',' << shortest_repr(report.truth[k]) << ','
        << shortest_repr(inst[i]) << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace tsnet
