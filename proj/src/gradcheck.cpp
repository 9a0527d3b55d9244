#include "tsnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "tsnet/model.hpp"
#include "tsnet/rng.hpp"
#include "tsnet/trainer.hpp"

namespace tsnet {

namespace {

Tensor uniform(Rng& rng, Shape shape, bool requires_grad, double lo = -1.0, double hi = 1.0) {
  Vector v(static_cast<Eigen::Index>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Magnitudes in [0.1, 1] so no probe straddles the ReLU kink.
Tensor away_from_zero(Rng& rng, Shape shape) {
  Vector v(static_cast<Eigen::Index>(numel(shape)));
  for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return Tensor(std::move(shape), std::move(v), true);
}

std::size_t extent(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

Tensor readout(const Tensor& x, const Tensor& r) { return sum(elementwise_mul(x, r)); }

class Suite {
 public:
  explicit Suite(const GradCheckOptions& o) : opt_(o) {}

  void check(const std::string& name, const std::function<Tensor()>& f, const Tensor& theta) {
    auto it = std::find_if(report_.entries.begin(), report_.entries.end(),
                           [&](const GradCheckEntry& e) { return e.name == name; });
    if (it == report_.entries.end()) {
      report_.entries.push_back({name, 0.0, 0, true});
      it = report_.entries.end() - 1;
    }
    it->max_rel_error = std::max(it->max_rel_error, grad_check(f, theta, opt_.eps));
  }

  void end_trial(const std::string& prefix) {
    for (auto& e : report_.entries) {
      if (e.name.rfind(prefix, 0) == 0) ++e.trials;
    }
  }

  GradCheckReport finish() {
    report_.tolerance = opt_.tolerance;
    for (auto& e : report_.entries) e.passed = e.max_rel_error < opt_.tolerance;
    return report_;
  }

 private:
  GradCheckOptions opt_;
  GradCheckReport report_;
};

void model_loss_trial(Suite& suite, Rng& rng) {
  TwoStreamConfig cfg;
  cfg.branch.blocks = {{3, 3, 2, 1}, {4, 3, 2, 1}};
  cfg.mlp_hidden = {5};
  cfg.dropout_p = 0.3;
  cfg.height = 6;
  cfg.width = 8;
  TwoStreamModel model = build_model(cfg, rng.next());
  // He-uniform weights keep activations O(1) through the stack; the default
  // fan-in init shrinks them layer by layer towards the rounding floor.
  for (Parameter* p : model.parameters()) {
    const auto& v = p->value;
    const double bound = v.rank() == 1 ? 0.1 : std::sqrt(6.0 * static_cast<double>(v.shape()[0]) / static_cast<double>(v.size()));
    for (double& x : p->value.values()) x = rng.uniform(-bound, bound);
  }
  const Tensor frames = uniform(rng, {2, 3, 6, 8}, false, 0.0, 1.0);
  const Tensor flows = uniform(rng, {2, 3, 6, 8}, false, 0.0, 1.0);
  const std::uint64_t dropout_seed = rng.next();
  const double lambda = rng.uniform(0.5, 1.5);
  const auto out = model.forward(frames, flows, true, dropout_seed);
  Tensor t_main = uniform(rng, {2}, false, -0.05, 0.05), t_aux = uniform(rng, {2}, false, -0.05, 0.05);
  t_main.values() += out.main.values();
  t_aux.values() += out.aux.values();
  auto loss = [&] {
    const auto y = model.forward(frames, flows, true, dropout_seed);
    return mtl_loss(y.main, y.aux, t_main, t_aux, lambda);
  };
  for (Parameter* p : model.parameters()) suite.check("two_stream_mtl_loss", loss, p->value);
}

}  // namespace

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.passed; });
}

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json ops = nlohmann::json::array();
  for (const auto& e : entries) {
    ops.push_back({{"name", e.name}, {"max_rel_error", e.max_rel_error}, {"trials", e.trials}, {"passed", e.passed}});
  }
  return {{"tolerance", tolerance}, {"passed", passed()}, {"ops", ops}};
}

Tensor flip_gradient(const Tensor& x) {
  return Tensor::from_op(x.shape(), x.values(), {x}, [](const detail::Node& self) {
    self.parents[0]->accumulate(-self.grad);
  });
}

GradCheckReport run_gradcheck_suite(const GradCheckOptions& o) {
  Suite suite(o);
  Rng rng(o.seed);
  for (int t = 0; t < o.trials; ++t) {
    {
      const std::size_t n = extent(rng, 1, 2), cin = extent(rng, 1, 3), cout = extent(rng, 1, 3),
                        h = extent(rng, 3, 5), w = extent(rng, 3, 5), k = extent(rng, 1, 3),
                        stride = extent(rng, 1, 2), pad = extent(rng, 0, 1);
      Tensor x = uniform(rng, {n, cin, h, w}, true), wt = uniform(rng, {cout, cin, k, k}, true),
             b = uniform(rng, {cout}, true);
      Tensor r = uniform(rng, o.conv(x, wt, b, stride, pad).shape(), false);
      auto f = [&] { return readout(o.conv(x, wt, b, stride, pad), r); };
      suite.check("conv2d.input", f, x);
      suite.check("conv2d.weight", f, wt);
      suite.check("conv2d.bias", f, b);
      suite.end_trial("conv2d");
    }
    {
      Tensor x = away_from_zero(rng, {extent(rng, 1, 5), extent(rng, 1, 5)});
      Tensor r = uniform(rng, x.shape(), false);
      suite.check("relu", [&] { return readout(relu(x), r); }, x);
      suite.end_trial("relu");
    }
    {
      Tensor x = uniform(rng, {extent(rng, 1, 3), extent(rng, 1, 4), extent(rng, 1, 5), extent(rng, 1, 5)}, true);
      Tensor r = uniform(rng, {x.dim(0), x.dim(1)}, false);
      suite.check("global_avg_pool", [&] { return readout(global_avg_pool(x), r); }, x);
      suite.end_trial("global_avg_pool");
    }
    {
      const std::size_t n = extent(rng, 1, 5), din = extent(rng, 1, 5), dout = extent(rng, 1, 5);
      Tensor x = uniform(rng, {n, din}, true), w = uniform(rng, {dout, din}, true), b = uniform(rng, {dout}, true);
      Tensor r = uniform(rng, {n, dout}, false);
      auto f = [&] { return readout(dense(x, w, b), r); };
      suite.check("dense.input", f, x);
      suite.check("dense.weight", f, w);
      suite.check("dense.bias", f, b);
      suite.end_trial("dense");
    }
    {
      Shape s{extent(rng, 1, 5), extent(rng, 1, 5)};
      Tensor a = uniform(rng, s, true), b = uniform(rng, s, true), r = uniform(rng, s, false);
      auto f = [&] { return readout(elementwise_mul(a, b), r); };
      suite.check("elementwise_mul.lhs", f, a);
      suite.check("elementwise_mul.rhs", f, b);
      suite.end_trial("elementwise_mul");
    }
    {
      Tensor x = uniform(rng, {extent(rng, 1, 5), extent(rng, 1, 5)}, true);
      Tensor r = uniform(rng, x.shape(), false);
      const std::uint64_t seed = rng.next();
      suite.check("dropout", [&] { return readout(dropout(x, 0.4, true, seed), r); }, x);
      suite.end_trial("dropout");
    }
    {
      const std::size_t n = extent(rng, 1, 5);
      Tensor p = uniform(rng, {n}, true), y = uniform(rng, {n}, true);
      auto f = [&] { return mse(p, y); };
      suite.check("mse.pred", f, p);
      suite.check("mse.target", f, y);
      suite.end_trial("mse");
    }
    {
      Shape s{extent(rng, 1, 4), extent(rng, 1, 4)};
      Tensor a = uniform(rng, s, true), b = uniform(rng, s, true), r = uniform(rng, {s[0]}, false);
      const double alpha = rng.uniform(-2, 2);
      const std::size_t col = rng.below(s[1]);
      auto f = [&] { return readout(select_column(scale(add(a, b), alpha), col), r); };
      suite.check("add_scale_select.lhs", f, a);
      suite.check("add_scale_select.rhs", f, b);
      suite.check("sum", [&] { return sum(elementwise_mul(a, a)); }, a);
      suite.end_trial("add_scale_select");
      suite.end_trial("sum");
    }
    model_loss_trial(suite, rng);
    suite.end_trial("two_stream_mtl_loss");
  }
  return suite.finish();
}

}  // namespace tsnet
