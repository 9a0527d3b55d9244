#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "tsnet/dataset.hpp"
#include "tsnet/error.hpp"
#include "tsnet/rng.hpp"

namespace tsnet {

namespace fs = std::filesystem;

namespace {

constexpr double kBackground = 32.0;
constexpr double kBand = 255.0;

}  // namespace

void SynthConfig::validate() const {
  if (width <= 0 || height <= 0) throw UsageError("synth: frame size must be positive");
  if (n_frames < 2) throw UsageError("synth: need at least two frames");
  if (!(band_width > 0.0 && band_width < width)) throw UsageError("synth: band_width must lie in (0, width)");
  if (!(sample_rate_hz > 0.0)) throw UsageError("synth: sample rate must be positive");
  if (components < 0 || amplitude_min < 0.0 || amplitude_max < amplitude_min) {
    throw UsageError("synth: amplitudes must satisfy 0 <= amplitude_min <= amplitude_max");
  }
  if (!(freq_min_hz >= 0.0 && freq_min_hz <= freq_max_hz)) throw UsageError("synth: invalid frequency range");
  if (dash_period < 1 || dash_length < 1 || dash_length > dash_period) {
    throw UsageError("synth: dash_length must lie in [1, dash_period]");
  }
  if (dash_speed < 0) throw UsageError("synth: dash_speed must be non-negative");
  const double excursion = std::abs(offset) + components * amplitude_max + 0.5 * band_width;
  if (excursion > 0.5 * width) {
    throw UsageError("synth: band excursion " + shortest_repr(excursion) + " px exceeds half the frame width " +
                     shortest_repr(0.5 * width));
  }
}

std::vector<double> synth_band_centres(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  struct Component {
    double amplitude, freq, phase;
  };
  std::vector<Component> parts;
  for (int k = 0; k < cfg.components; ++k) {
    const double a = rng.uniform(cfg.amplitude_min, cfg.amplitude_max);
    const double f = rng.uniform(cfg.freq_min_hz, cfg.freq_max_hz);
    const double phi = rng.uniform(0.0, 2.0 * M_PI);
    parts.push_back({a, f, phi});
  }
  const double lo = 0.5 * cfg.band_width, hi = cfg.width - 0.5 * cfg.band_width;
  std::vector<double> x(cfg.n_frames);
  for (std::size_t t = 0; t < cfg.n_frames; ++t) {
    double c = 0.5 * cfg.width + cfg.offset;
    const double seconds = static_cast<double>(t) / cfg.sample_rate_hz;
    for (const Component& p : parts) c += p.amplitude * std::sin(2.0 * M_PI * p.freq * seconds + p.phase);
    x[t] = std::clamp(c, lo, hi);
  }
  return x;
}

std::vector<double> synth_angles(const SynthConfig& cfg, const std::vector<double>& centres) {
  std::vector<double> angles(centres.size());
  const double mid = 0.5 * cfg.width;
  for (std::size_t t = 0; t < centres.size(); ++t) {
    angles[t] = cfg.k1 * (centres[t] - mid);
    if (t > 0) angles[t] += cfg.k2 * (centres[t] - centres[t - 1]);
  }
  return angles;
}

ColorImage synth_render(const SynthConfig& cfg, double centre, std::size_t t) {
  const double left = centre - 0.5 * cfg.band_width, right = centre + 0.5 * cfg.band_width;
  Eigen::ArrayXd row(cfg.width);
  for (int c = 0; c < cfg.width; ++c) {
    const double cover = std::clamp(std::min(right, c + 1.0) - std::max(left, static_cast<double>(c)), 0.0, 1.0);
    row[c] = kBackground + (kBand - kBackground) * cover;
  }
  GrayImage gray(cfg.height, cfg.width);
  const long long period = cfg.dash_period;
  const long long shift = static_cast<long long>(t % static_cast<std::size_t>(period)) * cfg.dash_speed % period;
  for (int y = 0; y < cfg.height; ++y) {
    if (((y - shift) % period + period) % period < cfg.dash_length) {
      gray.row(y) = row.transpose();
    } else {
      gray.row(y).setConstant(kBackground);
    }
  }
  ColorImage out;
  for (auto& ch : out.channels) ch = gray;
  return out;
}

nlohmann::json to_json(const SynthConfig& cfg) {
  return {{"width", cfg.width},
          {"height", cfg.height},
          {"n_frames", cfg.n_frames},
          {"seed", cfg.seed},
          {"band_width", cfg.band_width},
          {"k1", cfg.k1},
          {"k2", cfg.k2},
          {"sample_rate_hz", cfg.sample_rate_hz},
          {"offset", cfg.offset},
          {"components", cfg.components},
          {"amplitude_min", cfg.amplitude_min},
          {"amplitude_max", cfg.amplitude_max},
          {"freq_min_hz", cfg.freq_min_hz},
          {"freq_max_hz", cfg.freq_max_hz},
          {"dash_period", cfg.dash_period},
          {"dash_length", cfg.dash_length},
          {"dash_speed", cfg.dash_speed}};
}

void synth_generate(const SynthConfig& cfg, const fs::path& dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create dataset directory " + dir.string());

  const std::vector<double> centres = synth_band_centres(cfg);
  const std::vector<double> angles = synth_angles(cfg, centres);

  for (std::size_t t = 0; t < cfg.n_frames; ++t) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%06zu.ppm", t);
    write_ppm(dir / name, synth_render(cfg, centres[t], t));
  }

  std::ofstream csv(dir / "steering.csv", std::ios::binary | std::ios::trunc);
  csv << "index,timestamp_s,steering_angle_deg\n";
  for (std::size_t t = 0; t < cfg.n_frames; ++t) {
    csv << t << ',' << shortest_repr(static_cast<double>(t) / cfg.sample_rate_hz) << ',' << shortest_repr(angles[t]) << '\n';
  }
  if (!csv) throw DataError("cannot write steering.csv in " + dir.string());

  const nlohmann::json meta = {
      {"width", cfg.width},
      {"height", cfg.height},
      {"n_frames", cfg.n_frames},
      {"sample_rate_hz", cfg.sample_rate_hz},
      {"flow_max_magnitude", nullptr},
      {"oracle_series", centres},
      {"synth", to_json(cfg)}};
  std::ofstream out(dir / "meta.json", std::ios::binary | std::ios::trunc);
  out << meta.dump(2) << '\n';
  if (!out) throw DataError("cannot write meta.json in " + dir.string());
}

}  // namespace tsnet
