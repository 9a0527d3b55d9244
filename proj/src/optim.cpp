#include <cmath>
#include <limits>

#include "tsnet/error.hpp"
#include "tsnet/tensor.hpp"

namespace tsnet {

void adam_step(Tensor& theta, const Vector& grad, AdamState& state, double lr) {
  if (!(lr > 0.0)) throw UsageError("adam: learning rate must be positive, got " + std::to_string(lr));
  if (grad.size() != theta.values().size()) {
    throw ShapeError("adam: gradient length " + std::to_string(grad.size()) +
                     " != parameter size " + std::to_string(theta.size()));
  }
  if (state.m.size() != grad.size()) state.m = Vector::Zero(grad.size());
  if (state.v.size() != grad.size()) state.v = Vector::Zero(grad.size());
  ++state.step;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseAbs2();
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  theta.values().array() -=
      lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.epsilon);
}

Adam::Adam(std::vector<Tensor> params, double lr)
    : params_(std::move(params)), states_(params_.size()), lr_(lr) {
  if (!(lr > 0.0)) throw UsageError("adam: learning rate must be positive, got " + std::to_string(lr));
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.requires_grad()) continue;
    adam_step(p, p.grad(), states_[i], lr_);
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

double grad_check(const std::function<Tensor()>& f, Tensor theta, double eps) {
  if (!theta.requires_grad()) throw UsageError("grad_check: theta must require a gradient");
  theta.zero_grad();
  f().backward();
  const Vector analytic = theta.grad();
  theta.zero_grad();

  Vector& x = theta.values();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double up = f().item();
    x[i] = saved - eps;
    const double down = f().item();
    x[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
    if (!std::isfinite(err)) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace tsnet
