#pragma once

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tsnet/dataset.hpp"
#include "tsnet/metrics.hpp"
#include "tsnet/model.hpp"

namespace tsnet {

struct TrainConfig {
  int stage = 1;
  double learning_rate = 1e-4;
  std::size_t batch_size = 64;
  std::size_t epochs = 30;
  double mtl_lambda = 1.0;
  std::uint64_t shuffle_seed = 0;
  std::uint64_t seed = 0;  // parameter init, dropout masks and augmentation draws
  bool freeze_branches = true;
  bool augment = true;
  AugmentConfig augmentation;

  /// Published defaults: stage 1 lr 1e-4, batch 64, 30 epochs; stage 2
  /// lr 0.5e-4, batch 8, 1 epoch.
  static TrainConfig paper(int stage);
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);

struct StageReport {
  int stage = 1;
  std::string model;  // "spatial", "temporal" or "two_stream"
  std::vector<double> epoch_loss;
  double final_loss = 0.0;
  double wall_time_s = 0.0;  // kept out of to_json(): reports stay reproducible
  nlohmann::json config;
  std::string checkpoint;

  nlohmann::json to_json() const;
};

/// MSE(y_main, t_main) + lambda * MSE(y_aux, t_aux).
Tensor mtl_loss(const Tensor& y_main, const Tensor& y_aux, const Tensor& t_main, const Tensor& t_aux, double lambda);

struct BranchTraining {
  BranchRegressor model;
  StageReport report;
  CheckpointInfo info;  // stage tag, rng state and optimizer snapshot
};

struct TwoStreamTraining {
  TwoStreamModel model;
  StageReport report;
  CheckpointInfo info;
};

/// Stage 1: one stream with a temporary linear head, single-task MSE on
/// angle(t), Adam, seeded shuffles. Throws NumericalError on a non-finite loss.
BranchTraining train_branch(Stream stream, std::span<const Sample> samples, const BranchConfig& branch,
                            const TrainConfig& cfg);

/// Builds the two-stream model and copies the branch weights of two
/// stage-1 checkpoints by name. Throws DataError if a checkpoint has the
/// wrong kind or stream, or a branch config differing from `cfg.branch`.
TwoStreamModel init_from_stage1(const TwoStreamConfig& cfg, const Checkpoint& spatial, const Checkpoint& temporal,
                                std::uint64_t seed);

/// Stage 2: trains with mtl_loss. With freeze_branches the conv parameters
/// are excluded from the optimizer and stay bit-identical.
TwoStreamTraining fine_tune(TwoStreamModel model, std::span<const Sample> samples, const TrainConfig& cfg);

struct ExperimentProtocol {
  TwoStreamConfig model;
  TrainConfig stage1 = TrainConfig::paper(1);
  TrainConfig stage2 = TrainConfig::paper(2);
  double split_ratio = 0.6;
  double dt = 0.1;
};

struct ExperimentRow {
  std::string model;
  double rmse_deg = 0.0;
  double whiteness = 0.0;
};

struct ExperimentResult {
  std::vector<ExperimentRow> rows;  // spatial, temporal, two_stream
  BranchTraining spatial;
  BranchTraining temporal;
  TwoStreamTraining two_stream;
  std::vector<EvalReport> reports;
};

/// Trains the three models on `train` (stage 1 on the first split, stage 2
/// on the second) and scores them on `test`. Throws DataError when both
/// sets come from the same recording (equal fingerprints).
ExperimentResult run_experiment(std::span<const Sample> train, const std::string& train_fingerprint,
                                std::span<const Sample> test, const std::string& test_fingerprint,
                                const ExperimentProtocol& protocol);

/// Refuses to evaluate on the data a model was trained on.
void check_leakage(const std::string& train_fingerprint, const std::string& test_fingerprint);

void write_table_csv(const std::filesystem::path& path, const std::vector<ExperimentRow>& rows);

}  // namespace tsnet
