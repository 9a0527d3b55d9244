#include "tsnet/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "tsnet/error.hpp"

namespace tsnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string frame_name(std::size_t i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%06zu%s", i, ext);
  return buf;
}

double parse_double(std::string_view field, const std::string& where) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw DataError(where + ": malformed number '" + std::string(field) + "'");
  }
  return v;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<SteeringRecord> read_steering_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "index,timestamp_s,steering_angle_deg") {
    throw DataError(path.string() + ": unexpected header '" + line + "'");
  }
  std::vector<SteeringRecord> records;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_csv(line);
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (fields.size() != 3) throw DataError(where + ": expected 3 fields");
    const double index = parse_double(fields[0], where);
    if (index < 0 || index != std::floor(index)) throw DataError(where + ": index must be a non-negative integer");
    records.push_back({static_cast<std::size_t>(index), parse_double(fields[1], where),
                       parse_double(fields[2], where)});
  }
  return records;
}

}  // namespace

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string shortest_repr(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fnv1a_hex(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

DrivingSequence load_sequence(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  DrivingSequence seq;
  seq.dir = dir;
  const fs::path csv = dir / "steering.csv";
  seq.records = read_steering_csv(csv);
  std::string fingerprint_src = read_file(csv);

  const fs::path meta_path = dir / "meta.json";
  std::optional<json> meta;
  if (fs::exists(meta_path)) {
    const std::string text = read_file(meta_path);
    fingerprint_src += text;
    try {
      meta = json::parse(text);
    } catch (const json::exception& e) {
      throw DataError(meta_path.string() + ": " + e.what());
    }
  }
  seq.fingerprint = fnv1a_hex(fingerprint_src);

  for (std::size_t i = 0; i < seq.records.size(); ++i) {
    const SteeringRecord& r = seq.records[i];
    if (r.frame_index != i) {
      throw DataError("steering.csv: record " + std::to_string(i) + " has index " +
                      std::to_string(r.frame_index) + " (indices must be contiguous from 0)");
    }
    if (i > 0 && !(r.timestamp_s > seq.records[i - 1].timestamp_s)) {
      throw DataError("steering.csv: timestamp at index " + std::to_string(i) + " is not increasing");
    }
  }

  std::size_t n_frames = 0;
  while (fs::exists(dir / frame_name(n_frames, ".ppm")) || fs::exists(dir / frame_name(n_frames, ".png"))) {
    ++n_frames;
  }
  if (n_frames != seq.records.size()) {
    const std::size_t gap = std::min(n_frames, seq.records.size());
    throw DataError("dataset " + dir.string() + ": " + std::to_string(n_frames) + " frames but " +
                    std::to_string(seq.records.size()) + " steering records; first unmatched index " +
                    std::to_string(gap));
  }
  if (n_frames == 0) throw DataError("dataset " + dir.string() + " has no frames");

  seq.frames.reserve(n_frames);
  for (std::size_t i = 0; i < n_frames; ++i) {
    const fs::path ppm = dir / frame_name(i, ".ppm");
    seq.frames.push_back(read_image(fs::exists(ppm) ? ppm : dir / frame_name(i, ".png")));
    const ColorImage& f = seq.frames.back();
    if (f.height() != seq.frames.front().height() || f.width() != seq.frames.front().width()) {
      throw DataError("frame " + std::to_string(i) + " is " + std::to_string(f.height()) + "x" +
                      std::to_string(f.width()) + ", expected " +
                      std::to_string(seq.frames.front().height()) + "x" +
                      std::to_string(seq.frames.front().width()));
    }
  }
  seq.height = static_cast<int>(seq.frames.front().height());
  seq.width = static_cast<int>(seq.frames.front().width());

  if (meta) {
    try {
      if (meta->at("width").get<int>() != seq.width || meta->at("height").get<int>() != seq.height) {
        throw DataError("meta.json dimensions disagree with the frames");
      }
      if (meta->at("n_frames").get<std::size_t>() != n_frames) {
        throw DataError("meta.json n_frames disagrees with the frame count");
      }
      seq.sample_rate_hz = meta->at("sample_rate_hz").get<double>();
      if (meta->contains("flow_max_magnitude") && !meta->at("flow_max_magnitude").is_null()) {
        seq.flow_max_magnitude = meta->at("flow_max_magnitude").get<double>();
      }
      if (meta->contains("oracle_series") && !meta->at("oracle_series").is_null()) {
        seq.oracle_series = meta->at("oracle_series").get<std::vector<double>>();
      }
    } catch (const json::exception& e) {
      throw DataError(meta_path.string() + ": " + e.what());
    }
  } else if (n_frames > 1) {
    seq.sample_rate_hz = static_cast<double>(n_frames - 1) /
                         (seq.records.back().timestamp_s - seq.records.front().timestamp_s);
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Flow cache.

fs::path FlowCache::pair_path(std::size_t i) const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "flow_%06zu.bin", i);
  return dir / buf;
}

FlowField FlowCache::load(std::size_t i) const {
  if (i >= n_pairs) throw DataError("flow pair " + std::to_string(i) + " out of range");
  FlowField f = read_flow(pair_path(i));
  if (f.width() != width || f.height() != height) {
    throw DataError(pair_path(i).string() + ": dimensions disagree with the cache metadata");
  }
  return f;
}

double flow_magnitude_percentile(const std::vector<FlowField>& flows, double q) {
  std::vector<double> mags;
  for (const FlowField& f : flows) {
    const GrayImage m = f.magnitude();
    mags.insert(mags.end(), m.data(), m.data() + m.size());
  }
  if (mags.empty()) return 1.0;
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(mags.size())));
  const std::size_t k = std::clamp<std::size_t>(rank, 1, mags.size()) - 1;
  std::nth_element(mags.begin(), mags.begin() + static_cast<long>(k), mags.end());
  return mags[k] > 0.0 ? mags[k] : 1.0;
}

namespace {

json params_json(const FlowParams& p) {
  return {{"pyramid_scale", p.pyramid_scale}, {"levels", p.levels},
          {"window_size", p.window_size},     {"iterations", p.iterations},
          {"poly_n", p.poly_n},               {"poly_sigma", p.poly_sigma}};
}

FlowParams params_from_json(const json& j) {
  FlowParams p;
  p.pyramid_scale = j.at("pyramid_scale").get<double>();
  p.levels = j.at("levels").get<int>();
  p.window_size = j.at("window_size").get<int>();
  p.iterations = j.at("iterations").get<int>();
  p.poly_n = j.at("poly_n").get<int>();
  p.poly_sigma = j.at("poly_sigma").get<double>();
  return p;
}

bool valid_pair_file(const fs::path& path, int width, int height) {
  if (!fs::exists(path)) return false;
  try {
    const FlowField f = read_flow(path);
    return f.width() == width && f.height() == height;
  } catch (const DataError&) {
    return false;
  }
}

void write_if_changed(const fs::path& path, const std::string& text) {
  if (fs::exists(path) && read_file(path) == text) return;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

}  // namespace

FlowCache precompute_flows(const DrivingSequence& seq, const FlowParams& params, const fs::path& cache_dir,
                           int threads) {
  params.validate();
  if (seq.size() < 2) throw DataError("flow precomputation needs at least two frames");
  std::error_code ec;
  fs::create_directories(cache_dir, ec);
  if (ec || !fs::is_directory(cache_dir)) {
    throw DataError("cannot create flow cache directory " + cache_dir.string());
  }

  FlowCache cache;
  cache.dir = cache_dir;
  cache.n_pairs = seq.size() - 1;
  cache.width = seq.width;
  cache.height = seq.height;
  cache.params = params;

  // Parameters are part of the cache identity: a change invalidates every pair.
  const fs::path meta_path = cache_dir / "flow_meta.json";
  bool reuse = false;
  if (fs::exists(meta_path)) {
    try {
      const json old = json::parse(read_file(meta_path));
      reuse = old.at("params") == params_json(params) && old.at("source") == seq.fingerprint &&
              old.at("estimator_version") == kFlowEstimatorVersion;
    } catch (const std::exception&) {
      reuse = false;
    }
  }

  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < cache.n_pairs; ++i) {
    if (!reuse || !valid_pair_file(cache.pair_path(i), seq.width, seq.height)) todo.push_back(i);
  }

  auto work = [&](std::size_t worker, std::size_t stride) {
    for (std::size_t k = worker; k < todo.size(); k += stride) {
      const std::size_t i = todo[k];
      const FlowField f = estimate_flow(rgb_to_gray(seq.frames[i]), rgb_to_gray(seq.frames[i + 1]), params);
      write_flow(cache.pair_path(i), f);
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1,
                                                        std::max<std::size_t>(todo.size(), 1));
  if (n_threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_threads; ++w) pool.emplace_back(work, w, n_threads);
    for (auto& t : pool) t.join();
  }

  std::vector<FlowField> flows;
  flows.reserve(cache.n_pairs);
  for (std::size_t i = 0; i < cache.n_pairs; ++i) flows.push_back(cache.load(i));
  cache.max_magnitude = flow_magnitude_percentile(flows);

  const json meta = {{"n_pairs", cache.n_pairs},
                     {"width", cache.width},
                     {"height", cache.height},
                     {"flow_max_magnitude", cache.max_magnitude},
                     {"params", params_json(params)},
                     {"estimator_version", kFlowEstimatorVersion},
                     {"source", seq.fingerprint}};
  write_if_changed(meta_path, meta.dump(2) + "\n");
  return cache;
}

FlowCache open_flow_cache(const fs::path& cache_dir) {
  const fs::path meta_path = cache_dir / "flow_meta.json";
  if (!fs::exists(meta_path)) throw DataError("flow cache not found: " + meta_path.string());
  FlowCache cache;
  cache.dir = cache_dir;
  try {
    const json meta = json::parse(read_file(meta_path));
    cache.n_pairs = meta.at("n_pairs").get<std::size_t>();
    cache.width = meta.at("width").get<int>();
    cache.height = meta.at("height").get<int>();
    cache.max_magnitude = meta.at("flow_max_magnitude").get<double>();
    cache.params = params_from_json(meta.at("params"));
  } catch (const json::exception& e) {
    throw DataError(meta_path.string() + ": " + e.what());
  }
  return cache;
}

// ---------------------------------------------------------------------------
// Samples.

std::vector<Sample> make_samples(const DrivingSequence& seq, const FlowCache& cache, double max_magnitude) {
  if (seq.size() < 2) throw DataError("a sequence needs at least two frames to form samples");
  if (cache.n_pairs != seq.size() - 1) {
    throw DataError("flow cache holds " + std::to_string(cache.n_pairs) + " pairs, sequence needs " +
                    std::to_string(seq.size() - 1));
  }
  if (cache.width != seq.width || cache.height != seq.height) {
    throw DataError("flow cache dimensions disagree with the sequence");
  }
  for (std::size_t i = 0; i < cache.n_pairs; ++i) {
    if (!fs::exists(cache.pair_path(i))) {
      throw DataError("flow cache incomplete: missing pair " + std::to_string(i));
    }
  }
  std::vector<Sample> samples;
  samples.reserve(seq.size() - 1);
  for (std::size_t t = 1; t < seq.size(); ++t) {
    Sample s;
    s.t = t;
    s.frame = seq.frames[t];
    s.flow = cache.load(t - 1);
    s.flow_rgb = encode_flow_rgb(s.flow, max_magnitude);
    s.max_magnitude = max_magnitude;
    s.target_main = seq.records[t].angle_deg;
    s.target_aux = seq.records[t - 1].angle_deg;
    samples.push_back(std::move(s));
  }
  return samples;
}

std::pair<std::span<const Sample>, std::span<const Sample>> stage_split(std::span<const Sample> samples,
                                                                        double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw UsageError("stage_split: ratio must lie in (0, 1)");
  const auto cut = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(samples.size())));
  if (cut == 0 || cut == samples.size()) {
    throw UsageError("stage_split: " + std::to_string(samples.size()) + " samples at ratio " +
                     std::to_string(ratio) + " leave one side empty");
  }
  return {samples.first(cut), samples.subspan(cut)};
}

}  // namespace tsnet
