#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tsnet/image.hpp"
#include "tsnet/optflow.hpp"

namespace tsnet {

struct SteeringRecord {
  std::size_t frame_index = 0;
  double timestamp_s = 0.0;
  double angle_deg = 0.0;  // positive = right
};

/// A recorded drive: frames `frame_%06d.{ppm,png}`, `steering.csv` and an
/// optional `meta.json` in one directory. Frames are loaded eagerly.
struct DrivingSequence {
  std::filesystem::path dir;
  int width = 0;
  int height = 0;
  double sample_rate_hz = 10.0;
  std::optional<double> flow_max_magnitude;
  std::vector<double> oracle_series;  // band centre x_t, synthetic data only
  std::vector<SteeringRecord> records;
  std::vector<ColorImage> frames;
  std::string fingerprint;  // hash of steering.csv and meta.json contents

  std::size_t size() const { return frames.size(); }
};

/// Validates and loads a sequence directory. Throws DataError naming the
/// offending index for missing frames, record/frame count mismatches,
/// non-contiguous indices, non-increasing timestamps or size mismatches.
DrivingSequence load_sequence(const std::filesystem::path& dir);

/// Parameters of the synthetic lane-marking scene. A dashed bright band
/// (255 on a background of 32) moves horizontally while its dashes scroll
/// down by dash_speed rows per frame; its centre is
///   x_t = W/2 + offset + sum_k a_k sin(2 pi f_k t / rate + phi_k)
/// and the label is angle(t) = k1 (x_t - W/2) + k2 (x_t - x_{t-1}), with the
/// velocity term absent at t = 0.
struct SynthConfig {
  int width = 64;
  int height = 32;
  std::size_t n_frames = 500;
  std::uint64_t seed = 42;
  double band_width = 6.0;
  double k1 = 0.5;  // deg/px
  double k2 = 2.0;  // deg/(px/frame)
  double sample_rate_hz = 10.0;
  double offset = 0.0;
  int components = 3;
  double amplitude_min = 3.0;  // per component, px
  double amplitude_max = 6.0;
  double freq_min_hz = 0.05;
  double freq_max_hz = 0.6;
  int dash_period = 8;  // rows
  int dash_length = 5;  // bright rows per period
  int dash_speed = 1;   // rows per frame

  /// Throws UsageError if the band could leave the frame or fields are invalid.
  void validate() const;
};

nlohmann::json to_json(const SynthConfig& cfg);

/// Band centre series x_t for t = 0..n_frames-1.
std::vector<double> synth_band_centres(const SynthConfig& cfg);

/// Labels derived from a band centre series.
std::vector<double> synth_angles(const SynthConfig& cfg, const std::vector<double>& centres);

/// Renders frame `t` with an anti-aliased band centred at `centre`.
ColorImage synth_render(const SynthConfig& cfg, double centre, std::size_t t = 0);

/// Writes frames, steering.csv and meta.json into `dir` (created if needed).
void synth_generate(const SynthConfig& cfg, const std::filesystem::path& dir);

/// Flow pairs of one sequence, stored as `flow_%06d.bin` (pair i holds
/// frame i -> i+1) plus `flow_meta.json`.
struct FlowCache {
  std::filesystem::path dir;
  std::size_t n_pairs = 0;
  int width = 0;
  int height = 0;
  double max_magnitude = 1.0;  // 99th percentile magnitude over all pairs
  FlowParams params;

  std::filesystem::path pair_path(std::size_t i) const;
  FlowField load(std::size_t i) const;
};

/// Nearest-rank 99th percentile of flow magnitudes; 1.0 if that is not positive.
double flow_magnitude_percentile(const std::vector<FlowField>& flows, double q = 0.99);

/// Computes the missing or invalid pair files of `seq` into `cache_dir`.
/// Existing valid files are left untouched. `threads` workers split the
/// pairs; results do not depend on the thread count.
FlowCache precompute_flows(const DrivingSequence& seq, const FlowParams& params,
                           const std::filesystem::path& cache_dir, int threads = 1);

/// Opens a cache written by precompute_flows.
FlowCache open_flow_cache(const std::filesystem::path& cache_dir);

/// Aligned training unit for time t >= 1.
struct Sample {
  std::size_t t = 0;
  ColorImage frame;     // frame t
  FlowField flow;       // t-1 -> t
  ColorImage flow_rgb;  // colour-wheel encoding of `flow`
  double max_magnitude = 1.0;
  double target_main = 0.0;  // angle(t)
  double target_aux = 0.0;   // angle(t-1)
};

/// One sample per t in 1..n-1 using the cache's pair t-1 and the given
/// encoding scale. Throws DataError if the cache is incomplete or mismatched.
std::vector<Sample> make_samples(const DrivingSequence& seq, const FlowCache& cache,
                                 double max_magnitude);

struct AugmentConfig {
  double flip_probability = 0.5;
  double brightness = 25.0;  // offset drawn from [-brightness, brightness]
  double contrast_min = 0.8;
  double contrast_max = 1.2;
};

/// Mirror the frame and the flow (u negated, then re-encoded) and negate both targets.
Sample flip_sample(const Sample& s);

/// Brightness/contrast jitter of the frame only: clamp(c * frame + b, 0, 255).
Sample jitter_sample(const Sample& s, double brightness, double contrast);

/// Seeded random flip followed by photometric jitter.
Sample augment(const Sample& s, std::uint64_t seed, const AugmentConfig& cfg = {});

/// Contiguous temporal split at floor(ratio * n).
std::pair<std::span<const Sample>, std::span<const Sample>> stage_split(std::span<const Sample> samples,
                                                                        double ratio = 0.6);

/// FNV-1a 64-bit hash as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string read_file(const std::filesystem::path& path);

/// Shortest decimal text that parses back to exactly `v`.
std::string shortest_repr(double v);

}  // namespace tsnet
