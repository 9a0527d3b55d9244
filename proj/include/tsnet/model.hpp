#pragma once

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsnet/dataset.hpp"
#include "tsnet/rng.hpp"
#include "tsnet/tensor.hpp"

namespace tsnet {

struct ConvBlock {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t padding = 1;

  bool operator==(const ConvBlock&) const = default;
};

/// Convolution stack shared by both streams; each block is conv + ReLU and
/// the last block is pooled into the embedding.
struct BranchConfig {
  std::vector<ConvBlock> blocks;

  /// 16 -> 32 -> 64 -> 128 channels, 3x3 kernels, stride 2, padding 1.
  static BranchConfig desk();

  std::size_t embedding_dim() const { return blocks.empty() ? 0 : blocks.back().out_channels; }
  void validate() const;
  bool operator==(const BranchConfig&) const = default;
};

struct TwoStreamConfig {
  static constexpr std::size_t kHeads = 2;  // (main, aux)

  BranchConfig branch = BranchConfig::desk();
  std::vector<std::size_t> mlp_hidden{64};
  double dropout_p = 0.2;
  std::size_t height = 32;
  std::size_t width = 64;

  /// Throws UsageError for empty branches, zero sizes, a bad dropout rate
  /// or an input too small for the conv stack.
  void validate() const;
  bool operator==(const TwoStreamConfig&) const = default;
};

nlohmann::json to_json(const BranchConfig& cfg);
nlohmann::json to_json(const TwoStreamConfig& cfg);
BranchConfig branch_config_from_json(const nlohmann::json& j);
TwoStreamConfig two_stream_config_from_json(const nlohmann::json& j);

enum class Stream { kSpatial, kTemporal };

std::string to_string(Stream stream);
Stream parse_stream(const std::string& text);

/// Named trainable tensor.
struct Parameter {
  std::string name;
  Tensor value;
};

/// Conv stack + global average pooling. Parameter names are
/// `<prefix>.conv<i>.weight` and `<prefix>.conv<i>.bias`.
class Branch {
 public:
  Branch() = default;
  Branch(const BranchConfig& cfg, std::size_t in_channels, std::string prefix, Rng& rng);

  /// N x C x H x W -> N x embedding_dim.
  Tensor embed(const Tensor& x) const;

  const BranchConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }
  void collect(std::vector<Parameter*>& out);

 private:
  BranchConfig cfg_;
  std::string prefix_;
  std::vector<Parameter> weights_;
  std::vector<Parameter> biases_;
};

/// Image batch in N x 3 x H x W layout, scaled to [0, 1] by 1/255.
Tensor frames_to_tensor(std::span<const Sample> samples);
Tensor flows_to_tensor(std::span<const Sample> samples);

/// Spatial branch over the frame and temporal branch over the encoded flow,
/// pooled embeddings fused by elementwise product, then an MLP whose last
/// layer has two linear outputs (current and previous angle).
class TwoStreamModel {
 public:
  struct Output {
    Tensor main;  // N
    Tensor aux;   // N
  };

  TwoStreamModel() = default;

  const TwoStreamConfig& config() const { return cfg_; }

  /// Inputs must be N x 3 x H x W with values in [0, 1]. Dropout is active
  /// only when `training`, with masks drawn from `dropout_seed`.
  Output forward(const Tensor& frames, const Tensor& flows, bool training, std::uint64_t dropout_seed = 0) const;

  /// MLP applied to a fused embedding N x embedding_dim.
  Tensor head(const Tensor& fused, bool training, std::uint64_t dropout_seed = 0) const;

  /// Eval-mode y_main for each sample.
  std::vector<double> predict(std::span<const Sample> samples, std::size_t batch_size = 64) const;
  double predict(const Sample& sample) const;

  /// Replaces the temporal embedding (test hook). Pass an empty function to restore.
  void set_temporal_override(std::function<Tensor(const Tensor& flows)> fn) { temporal_override_ = std::move(fn); }

  Branch& spatial() { return spatial_; }
  Branch& temporal() { return temporal_; }
  Branch& branch(Stream s) { return s == Stream::kSpatial ? spatial_ : temporal_; }

  /// All parameters in a fixed order: spatial, temporal, mlp.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t param_count() const;

 private:
  friend TwoStreamModel build_model(const TwoStreamConfig& cfg, std::uint64_t seed);

  TwoStreamConfig cfg_;
  Branch spatial_;
  Branch temporal_;
  std::vector<Parameter> mlp_weights_;
  std::vector<Parameter> mlp_biases_;
  std::function<Tensor(const Tensor&)> temporal_override_;
};

/// Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)) of every
/// weight and bias, drawn from `seed`.
TwoStreamModel build_model(const TwoStreamConfig& cfg, std::uint64_t seed);

/// One stream with a temporary linear head on the pooled embedding.
/// Head parameters are named `head.weight` and `head.bias`.
class BranchRegressor {
 public:
  BranchRegressor() = default;
  BranchRegressor(Stream stream, const BranchConfig& cfg, std::size_t height, std::size_t width, std::uint64_t seed);

  Stream stream() const { return stream_; }
  const BranchConfig& config() const { return branch_.config(); }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }

  /// Input N x 3 x H x W in [0, 1]; returns N predictions.
  Tensor forward(const Tensor& x) const;
  /// Picks frames or flows according to the stream.
  Tensor input(std::span<const Sample> samples) const;
  std::vector<double> predict(std::span<const Sample> samples, std::size_t batch_size = 64) const;

  Branch& branch() { return branch_; }
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t param_count() const;

 private:
  Stream stream_ = Stream::kSpatial;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  Branch branch_;
  Parameter head_weight_;
  Parameter head_bias_;
};

// ---------------------------------------------------------------------------
// Checkpoints.

/// On-disk layout: "TSNET001", u32 LE header length, UTF-8 JSON header, then
/// per tensor: u32 name length, name, u32 rank, rank x u32 dims, f64 values,
/// all little-endian. Adam moments, when present, are stored as tensors
/// named `adam.m.<param>` and `adam.v.<param>`.
struct Checkpoint {
  std::string kind;   // "two_stream" or "branch"
  std::string stage;  // "init", "stage1" or "stage2"
  nlohmann::json header;  // config and provenance; kind/stage are mirrored here
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws DataError distinguishing a bad magic, truncation and malformed headers.
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Optimizer moments and step count for checkpointing, keyed by parameter name.
struct OptimizerSnapshot {
  std::int64_t step = 0;
  std::vector<std::pair<std::string, AdamState>> states;
};

struct CheckpointInfo {
  std::string stage = "init";
  std::string rng_state;
  std::optional<double> flow_max_magnitude;
  std::string data_fingerprint;
  nlohmann::json extra = nlohmann::json::object();
  std::optional<OptimizerSnapshot> optimizer;
};

Checkpoint make_checkpoint(const TwoStreamModel& model, const CheckpointInfo& info);
Checkpoint make_checkpoint(const BranchRegressor& model, const CheckpointInfo& info);

CheckpointInfo checkpoint_info(const Checkpoint& ckpt);

/// Rebuild models. Throws DataError if the kind, config or tensor set does
/// not match.
TwoStreamModel two_stream_from_checkpoint(const Checkpoint& ckpt);
BranchRegressor branch_from_checkpoint(const Checkpoint& ckpt);

/// Copies every tensor of `source` whose name matches a model parameter.
/// Tensors without a counterpart (such as a temporary head) are skipped.
/// Throws DataError on a shape mismatch. Returns the names copied.
std::vector<std::string> load_matching(TwoStreamModel& model, const Checkpoint& source);

}  // namespace tsnet
