#include "tsnet/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "tsnet/error.hpp"
#include "tsnet/rng.hpp"

namespace tsnet {

namespace {

using Clock = std::chrono::steady_clock;

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

Tensor targets(const std::vector<Sample>& batch, double Sample::*field) {
  Vector v(static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) v[static_cast<Eigen::Index>(i)] = batch[i].*field;
  return Tensor({batch.size()}, std::move(v));
}

OptimizerSnapshot snapshot(const Adam& opt, const std::vector<Parameter*>& trained) {
  OptimizerSnapshot snap;
  for (std::size_t i = 0; i < trained.size(); ++i) {
    const AdamState& s = opt.states()[i];
    snap.step = std::max(snap.step, s.step);
    if (s.m.size() > 0) snap.states.emplace_back(trained[i]->name, s);
  }
  return snap;
}

// Runs the epoch loop shared by both stages. `loss_fn` maps a batch and a
// dropout seed to a scalar loss.
template <class LossFn>
std::vector<double> run_epochs(std::span<const Sample> samples, const TrainConfig& cfg, Adam& opt, Rng& shuffle,
                               LossFn&& loss_fn) {
  std::vector<double> epoch_loss;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(samples.size(), shuffle);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Sample> batch;
      batch.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const Sample& s = samples[order[k]];
        if (cfg.augment) {
          batch.push_back(augment(s, mix_seed(cfg.seed, epoch * samples.size() + order[k]), cfg.augmentation));
        } else {
          batch.push_back(s);
        }
      }
      opt.zero_grad();
      const Tensor loss = loss_fn(batch, mix_seed(cfg.seed ^ 0xD20Full, step++));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                             std::to_string(start) + " (stage " + std::to_string(cfg.stage) + ")");
      }
      loss.backward();
      opt.step();
      total += value * static_cast<double>(batch.size());
    }
    epoch_loss.push_back(total / static_cast<double>(samples.size()));
  }
  return epoch_loss;
}

StageReport make_report(const TrainConfig& cfg, std::string model, std::vector<double> losses, Clock::time_point t0) {
  StageReport r;
  r.stage = cfg.stage;
  r.model = std::move(model);
  r.epoch_loss = std::move(losses);
  r.final_loss = r.epoch_loss.empty() ? 0.0 : r.epoch_loss.back();
  r.wall_time_s = std::chrono::duration<double>(Clock::now() - t0).count();
  r.config = to_json(cfg);
  return r;
}

}  // namespace

TrainConfig TrainConfig::paper(int stage) {
  TrainConfig cfg;
  cfg.stage = stage;
  if (stage == 2) {
    cfg.learning_rate = 0.5e-4;
    cfg.batch_size = 8;
    cfg.epochs = 1;
  }
  return cfg;
}

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw UsageError("stage must be 1 or 2");
  if (!(learning_rate > 0.0)) throw UsageError("learning rate must be positive");
  if (batch_size == 0) throw UsageError("batch size must be positive");
  if (epochs == 0) throw UsageError("epochs must be positive");
  if (!(mtl_lambda >= 0.0)) throw UsageError("mtl lambda must be non-negative");
}

nlohmann::json to_json(const TrainConfig& cfg) {
  const TrainConfig paper = TrainConfig::paper(cfg.stage);
  return {{"stage", cfg.stage},
          {"learning_rate", cfg.learning_rate},
          {"batch_size", cfg.batch_size},
          {"epochs", cfg.epochs},
          {"mtl_lambda", cfg.mtl_lambda},
          {"shuffle_seed", cfg.shuffle_seed},
          {"seed", cfg.seed},
          {"freeze_branches", cfg.freeze_branches},
          {"augment", cfg.augment},
          {"augmentation",
           {{"flip_probability", cfg.augmentation.flip_probability},
            {"brightness", cfg.augmentation.brightness},
            {"contrast_min", cfg.augmentation.contrast_min},
            {"contrast_max", cfg.augmentation.contrast_max}}},
          {"paper_defaults",
           {{"learning_rate", paper.learning_rate}, {"batch_size", paper.batch_size}, {"epochs", paper.epochs}}}};
}

nlohmann::json StageReport::to_json() const {
  return {{"stage", stage},         {"model", model},   {"epoch_loss", epoch_loss},
          {"final_loss", final_loss}, {"config", config}, {"checkpoint", checkpoint}};
}

Tensor mtl_loss(const Tensor& y_main, const Tensor& y_aux, const Tensor& t_main, const Tensor& t_aux, double lambda) {
  if (!(lambda >= 0.0)) throw UsageError("mtl_loss: lambda must be non-negative");
  if (y_main.size() != y_aux.size() || y_main.size() != t_main.size() || y_aux.size() != t_aux.size()) {
    throw ShapeError("mtl_loss: batch lengths differ");
  }
  const Tensor main = mse(y_main, t_main);
  if (lambda == 0.0) return main;
  return add(main, scale(mse(y_aux, t_aux), lambda));
}

BranchTraining train_branch(Stream stream, std::span<const Sample> samples, const BranchConfig& branch,
                            const TrainConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw UsageError("train_branch: no samples");
  const auto t0 = Clock::now();
  const auto h = static_cast<std::size_t>(samples.front().frame.height());
  const auto w = static_cast<std::size_t>(samples.front().frame.width());
  BranchTraining out;
  out.model = BranchRegressor(stream, branch, h, w, mix_seed(cfg.seed, static_cast<std::uint64_t>(stream)));
  const auto params = out.model.parameters();
  std::vector<Tensor> tensors;
  for (Parameter* p : params) tensors.push_back(p->value);
  Adam opt(tensors, cfg.learning_rate);
  Rng shuffle(cfg.shuffle_seed);
  auto losses = run_epochs(samples, cfg, opt, shuffle, [&](const std::vector<Sample>& batch, std::uint64_t) {
    return mse(out.model.forward(out.model.input(batch)), targets(batch, &Sample::target_main));
  });
  out.report = make_report(cfg, to_string(stream), std::move(losses), t0);
  out.info.stage = "stage1";
  out.info.rng_state = shuffle.state();
  out.info.optimizer = snapshot(opt, params);
  out.info.extra = {{"train", out.report.config}};
  return out;
}

TwoStreamModel init_from_stage1(const TwoStreamConfig& cfg, const Checkpoint& spatial, const Checkpoint& temporal,
                                std::uint64_t seed) {
  TwoStreamModel model = build_model(cfg, seed);
  for (const auto& [ckpt, stream] : {std::pair{&spatial, Stream::kSpatial}, std::pair{&temporal, Stream::kTemporal}}) {
    const BranchRegressor branch = branch_from_checkpoint(*ckpt);
    if (branch.stream() != stream) {
      throw DataError("expected a " + to_string(stream) + " stage-1 checkpoint, got " + to_string(branch.stream()));
    }
    if (!(branch.config() == cfg.branch) || branch.height() != cfg.height || branch.width() != cfg.width) {
      throw DataError("checkpoint incompatible: " + to_string(stream) + " branch config differs from the model config");
    }
    std::vector<Parameter*> wanted;
    model.branch(stream).collect(wanted);
    const auto copied = load_matching(model, *ckpt);
    if (copied.size() != wanted.size()) {
      throw DataError("checkpoint incompatible: " + to_string(stream) + " checkpoint provides " +
                      std::to_string(copied.size()) + " of " + std::to_string(wanted.size()) + " branch tensors");
    }
  }
  return model;
}

TwoStreamTraining fine_tune(TwoStreamModel model, std::span<const Sample> samples, const TrainConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw UsageError("fine_tune: no samples");
  const auto t0 = Clock::now();
  std::vector<Parameter*> frozen;
  if (cfg.freeze_branches) {
    model.spatial().collect(frozen);
    model.temporal().collect(frozen);
  }
  std::vector<Parameter*> trained;
  for (Parameter* p : model.parameters()) {
    const bool freeze = std::find(frozen.begin(), frozen.end(), p) != frozen.end();
    p->value.set_requires_grad(!freeze);
    if (!freeze) trained.push_back(p);
  }
  std::vector<Tensor> tensors;
  for (Parameter* p : trained) tensors.push_back(p->value);
  Adam opt(tensors, cfg.learning_rate);
  Rng shuffle(cfg.shuffle_seed);
  auto losses = run_epochs(samples, cfg, opt, shuffle, [&](const std::vector<Sample>& batch, std::uint64_t seed) {
    const auto y = model.forward(frames_to_tensor(batch), flows_to_tensor(batch), true, seed);
    return mtl_loss(y.main, y.aux, targets(batch, &Sample::target_main), targets(batch, &Sample::target_aux),
                    cfg.mtl_lambda);
  });
  for (Parameter* p : frozen) p->value.set_requires_grad(true);
  TwoStreamTraining out;
  out.report = make_report(cfg, "two_stream", std::move(losses), t0);
  out.info.stage = "stage2";
  out.info.rng_state = shuffle.state();
  out.info.optimizer = snapshot(opt, trained);
  out.info.extra = {{"train", out.report.config}};
  out.model = std::move(model);
  return out;
}

void check_leakage(const std::string& train_fingerprint, const std::string& test_fingerprint) {
  if (!train_fingerprint.empty() && train_fingerprint == test_fingerprint) {
    throw DataError("test data has the same fingerprint as the training data (" + train_fingerprint +
                    "); evaluating on training frames would leak");
  }
}

ExperimentResult run_experiment(std::span<const Sample> train, const std::string& train_fingerprint,
                                std::span<const Sample> test, const std::string& test_fingerprint,
                                const ExperimentProtocol& protocol) {
  check_leakage(train_fingerprint, test_fingerprint);
  protocol.model.validate();
  const auto [first, second] = stage_split(train, protocol.split_ratio);
  ExperimentResult r;
  r.spatial = train_branch(Stream::kSpatial, first, protocol.model.branch, protocol.stage1);
  r.temporal = train_branch(Stream::kTemporal, first, protocol.model.branch, protocol.stage1);
  const TwoStreamModel init = init_from_stage1(protocol.model, make_checkpoint(r.spatial.model, r.spatial.info),
                                               make_checkpoint(r.temporal.model, r.temporal.info), protocol.stage2.seed);
  r.two_stream = fine_tune(init, second, protocol.stage2);
  r.reports.push_back(evaluate(r.spatial.model, test, protocol.dt));
  r.reports.push_back(evaluate(r.temporal.model, test, protocol.dt));
  r.reports.push_back(evaluate(r.two_stream.model, test, protocol.dt));
  const char* names[] = {"spatial", "temporal", "two_stream"};
  for (std::size_t i = 0; i < 3; ++i) r.rows.push_back({names[i], r.reports[i].rmse_deg, r.reports[i].whiteness});
  return r;
}

void write_table_csv(const std::filesystem::path& path, const std::vector<ExperimentRow>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "model,rmse_deg,whiteness\n";
  for (const auto& row : rows) out << row.model << ',' << shortest_repr(row.rmse_deg) << ',' << shortest_repr(row.whiteness) << '\n';
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace tsnet
