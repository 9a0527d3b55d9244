#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "tsnet/error.hpp"
#include "tsnet/trainer.hpp"

namespace tsnet {
namespace {

using testing::TempDir;

struct SynthSet {
  std::vector<Sample> samples;
  std::string fingerprint;
};

SynthSet make_set(std::size_t frames, std::uint64_t seed) {
  TempDir dir("trainer_data");
  SynthConfig cfg;
  cfg.width = 32;
  cfg.height = 16;
  cfg.n_frames = frames;
  cfg.seed = seed;
  cfg.band_width = 4;
  cfg.amplitude_min = 1;
  cfg.amplitude_max = 3;
  synth_generate(cfg, dir / "seq");
  const DrivingSequence seq = load_sequence(dir / "seq");
  FlowParams fp;
  fp.levels = 2;
  fp.window_size = 9;
  const FlowCache cache = precompute_flows(seq, fp, dir / "flow");
  return {make_samples(seq, cache, cache.max_magnitude), seq.fingerprint};
}

const SynthSet& shared_set() {
  static const SynthSet set = make_set(41, 5);
  return set;
}

BranchConfig small_branch() { return {{{6, 3, 2, 1}, {12, 3, 2, 1}}}; }

TwoStreamConfig small_model() {
  TwoStreamConfig cfg;
  cfg.branch = small_branch();
  cfg.mlp_hidden = {16};
  cfg.dropout_p = 0.1;
  cfg.height = 16;
  cfg.width = 32;
  return cfg;
}

TrainConfig quick(int stage, std::size_t epochs) {
  TrainConfig cfg = TrainConfig::paper(stage);
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 8;
  cfg.epochs = epochs;
  cfg.seed = 3;
  cfg.shuffle_seed = 4;
  return cfg;
}

Tensor vec(std::initializer_list<double> v) { return Tensor({v.size()}, v); }

std::vector<Vector> snapshot(const std::vector<Parameter*>& params) {
  std::vector<Vector> out;
  for (const Parameter* p : params) out.push_back(p->value.values());
  return out;
}

TEST(MtlLoss, HandValue) {
  EXPECT_EQ(mtl_loss(vec({1}), vec({1}), vec({0}), vec({0}), 1.0).item(), 2.0);
  EXPECT_EQ(mtl_loss(vec({1, 1}), vec({1, 1}), vec({0, 0}), vec({0, 0}), 1.0).item(), 2.0);
}

TEST(MtlLoss, ZeroLambdaIsSingleTaskMse) {
  const Tensor y = vec({0.3, -1.7, 2.2}), t = vec({0.1, 0.4, 2.0}), aux = vec({5, 6, 7});
  EXPECT_EQ(mtl_loss(y, aux, t, vec({0, 0, 0}), 0.0).item(), mse(y, t).item());
}

TEST(MtlLoss, PerfectPredictionsGiveZero) {
  const Tensor a = vec({1.5, -2}), b = vec({0.25, 3});
  EXPECT_EQ(mtl_loss(a, b, a, b, 0.7).item(), 0.0);
}

TEST(MtlLoss, RejectsNegativeLambdaAndLengthMismatch) {
  EXPECT_THROW(mtl_loss(vec({1}), vec({1}), vec({0}), vec({0}), -0.1), UsageError);
  EXPECT_THROW(mtl_loss(vec({1, 2}), vec({1}), vec({0, 0}), vec({0}), 1.0), ShapeError);
}

TEST(MtlLoss, AuxErrorReachesSharedTrunk) {
  TwoStreamModel m = build_model(small_model(), 2);
  const auto& s = shared_set().samples;
  const auto batch = std::span(s).first(4);
  const auto y = m.forward(frames_to_tensor(batch), flows_to_tensor(batch), false);
  const Tensor t_main = y.main.detach();
  Tensor t_aux = y.aux.detach();
  t_aux.values().array() += 1.0;
  mtl_loss(y.main, y.aux, t_main, t_aux, 1.0).backward();
  double trunk = 0.0;
  for (Parameter* p : m.parameters()) {
    if (p->name == "mlp0.weight") trunk = p->value.grad().norm();
  }
  EXPECT_GT(trunk, 0.0);
}

TEST(TrainConfig, PaperDefaults) {
  const TrainConfig s1 = TrainConfig::paper(1), s2 = TrainConfig::paper(2);
  EXPECT_EQ(s1.learning_rate, 1e-4);
  EXPECT_EQ(s1.batch_size, 64u);
  EXPECT_EQ(s1.epochs, 30u);
  EXPECT_EQ(s2.learning_rate, 0.5e-4);
  EXPECT_EQ(s2.batch_size, 8u);
  EXPECT_EQ(s2.epochs, 1u);
  EXPECT_EQ(s2.mtl_lambda, 1.0);
  EXPECT_TRUE(s2.freeze_branches);
  TrainConfig bad = s1;
  bad.learning_rate = 0;
  EXPECT_THROW(bad.validate(), UsageError);
  bad = s1;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), UsageError);
  bad = s1;
  bad.epochs = 0;
  EXPECT_THROW(bad.validate(), UsageError);
  EXPECT_EQ(to_json(s2)["paper_defaults"]["learning_rate"], 0.5e-4);
}

TEST(TrainBranch, MemorisesTinySet) {
  const auto samples = std::span(shared_set().samples).first(32);
  TrainConfig cfg = quick(1, 500);
  cfg.augment = false;
  const BranchConfig branch{{{8, 3, 2, 1}, {16, 3, 2, 1}, {32, 3, 2, 1}}};
  const BranchTraining run = train_branch(Stream::kTemporal, samples, branch, cfg);
  EXPECT_EQ(run.report.epoch_loss.size(), 500u);
  EXPECT_LT(run.report.final_loss, 1e-2);
}

TEST(TrainBranch, SecondEpochImproves) {
  const BranchTraining run = train_branch(Stream::kSpatial, shared_set().samples, small_branch(), quick(1, 2));
  ASSERT_EQ(run.report.epoch_loss.size(), 2u);
  EXPECT_LT(run.report.epoch_loss[1], run.report.epoch_loss[0]);
  EXPECT_EQ(run.info.stage, "stage1");
  EXPECT_TRUE(run.info.optimizer.has_value());
}

TEST(TrainBranch, DeterministicGivenSeeds) {
  const auto a = train_branch(Stream::kSpatial, shared_set().samples, small_branch(), quick(1, 2));
  const auto b = train_branch(Stream::kSpatial, shared_set().samples, small_branch(), quick(1, 2));
  auto pa = const_cast<BranchRegressor&>(a.model).parameters();
  auto pb = const_cast<BranchRegressor&>(b.model).parameters();
  EXPECT_EQ(snapshot(pa), snapshot(pb));
  EXPECT_EQ(a.report.to_json(), b.report.to_json());
  EXPECT_EQ(a.info.rng_state, b.info.rng_state);
}

TEST(TrainBranch, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(train_branch(Stream::kSpatial, {}, small_branch(), quick(1, 1)), UsageError);
  std::vector<Sample> bad(shared_set().samples.begin(), shared_set().samples.begin() + 8);
  bad[3].target_main = std::nan("");
  EXPECT_THROW(train_branch(Stream::kSpatial, bad, small_branch(), quick(1, 1)), NumericalError);
}

class FineTuneTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto& s = shared_set().samples;
    const auto [first, second] = stage_split(s, 0.6);
    spatial_ = new BranchTraining(train_branch(Stream::kSpatial, first, small_branch(), quick(1, 20)));
    temporal_ = new BranchTraining(train_branch(Stream::kTemporal, first, small_branch(), quick(1, 20)));
  }
  static void TearDownTestSuite() {
    delete spatial_;
    delete temporal_;
  }
  TwoStreamModel init() const {
    return init_from_stage1(small_model(), make_checkpoint(spatial_->model, spatial_->info),
                            make_checkpoint(temporal_->model, temporal_->info), 8);
  }
  std::span<const Sample> second() const { return stage_split(shared_set().samples, 0.6).second; }

  static BranchTraining* spatial_;
  static BranchTraining* temporal_;
};

BranchTraining* FineTuneTest::spatial_ = nullptr;
BranchTraining* FineTuneTest::temporal_ = nullptr;

TEST_F(FineTuneTest, FrozenBranchesStayBitIdentical) {
  TwoStreamModel model = init();
  std::vector<Parameter*> branches;
  model.spatial().collect(branches);
  model.temporal().collect(branches);
  const auto before = snapshot(branches);
  const auto mlp_before = model.parameters().back()->value.values();
  TwoStreamTraining run = fine_tune(model, second(), quick(2, 3));
  std::vector<Parameter*> after;
  run.model.spatial().collect(after);
  run.model.temporal().collect(after);
  EXPECT_EQ(snapshot(after), before);
  EXPECT_NE(run.model.parameters().back()->value.values(), mlp_before);
  EXPECT_EQ(run.info.stage, "stage2");
  EXPECT_EQ(run.report.epoch_loss.size(), 3u);
}

TEST_F(FineTuneTest, UnfrozenUpdatesEveryTensor) {
  TwoStreamModel model = init();
  const auto before = snapshot(model.parameters());
  TrainConfig cfg = quick(2, 1);
  cfg.freeze_branches = false;
  TwoStreamTraining run = fine_tune(model, second(), cfg);
  const auto after = snapshot(run.model.parameters());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NE(before[i].norm(), after[i].norm()) << i;
}

TEST_F(FineTuneTest, StartsFromStageOneBranches) {
  TwoStreamModel model = init();
  const auto x = frames_to_tensor(second());
  const Tensor direct = const_cast<BranchRegressor&>(spatial_->model).branch().embed(x);
  EXPECT_EQ(model.spatial().embed(x).values(), direct.values());
}

TEST_F(FineTuneTest, TwoStreamFitsBetterThanSpatialAlone) {
  TrainConfig cfg = quick(2, 30);
  const TwoStreamTraining run = fine_tune(init(), second(), cfg);
  EXPECT_LT(run.report.final_loss, spatial_->report.final_loss);
}

TEST_F(FineTuneTest, RejectsMismatchedCheckpoints) {
  const Checkpoint s = make_checkpoint(spatial_->model, spatial_->info);
  const Checkpoint t = make_checkpoint(temporal_->model, temporal_->info);
  EXPECT_THROW(init_from_stage1(small_model(), t, s, 1), DataError);
  TwoStreamConfig other = small_model();
  other.branch.blocks[1].out_channels = 10;
  EXPECT_THROW(init_from_stage1(other, s, t, 1), DataError);
}

TEST(RunExperiment, ThreeRowsAndLeakageGuard) {
  const SynthSet& train = shared_set();
  const SynthSet test = make_set(21, 6);
  ExperimentProtocol protocol;
  protocol.model = small_model();
  protocol.stage1 = quick(1, 2);
  protocol.stage2 = quick(2, 1);
  const ExperimentResult r = run_experiment(train.samples, train.fingerprint, test.samples, test.fingerprint, protocol);
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_EQ(r.rows[0].model, "spatial");
  EXPECT_EQ(r.rows[2].model, "two_stream");
  for (const auto& row : r.rows) {
    EXPECT_TRUE(std::isfinite(row.rmse_deg));
    EXPECT_GE(row.whiteness, 0.0);
  }
  EXPECT_EQ(r.reports[2].n_samples, test.samples.size());
  EXPECT_THROW(run_experiment(train.samples, train.fingerprint, train.samples, train.fingerprint, protocol),
               DataError);
}

}  // namespace
}  // namespace tsnet
