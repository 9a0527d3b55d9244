#include "tsnet/model.hpp"

#include <algorithm>
#include <cmath>

#include "tsnet/error.hpp"
#include "tsnet/rng.hpp"

namespace tsnet {

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Vector values(static_cast<Eigen::Index>(numel(shape)));
  for (auto& v : values) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(values), true);
}

std::size_t conv_out(std::size_t in, const ConvBlock& b) {
  if (in + 2 * b.padding < b.kernel) return 0;
  return (in + 2 * b.padding - b.kernel) / b.stride + 1;
}

void check_input(const Tensor& x, std::size_t height, std::size_t width, const char* what) {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != height || x.dim(3) != width) {
    throw ShapeError(std::string(what) + ": expected N x 3 x " + std::to_string(height) + " x " +
                     std::to_string(width) + ", got " + to_string(x.shape()));
  }
  const auto& v = x.values();
  if (v.size() > 0 && (v.minCoeff() < 0.0 || v.maxCoeff() > 1.0)) {
    throw UsageError(std::string(what) + ": values must be scaled to [0, 1]");
  }
}

Tensor images_to_tensor(std::span<const Sample> samples, const ColorImage Sample::*field) {
  if (samples.empty()) throw UsageError("cannot batch an empty sample set");
  const ColorImage& first = samples.front().*field;
  const auto h = static_cast<std::size_t>(first.height()), w = static_cast<std::size_t>(first.width());
  Tensor out({samples.size(), 3, h, w});
  double* dst = out.data();
  for (const Sample& s : samples) {
    const ColorImage& img = s.*field;
    if (static_cast<std::size_t>(img.height()) != h || static_cast<std::size_t>(img.width()) != w) {
      throw ShapeError("sample t=" + std::to_string(s.t) + " has a different image size");
    }
    for (std::size_t c = 0; c < 3; ++c) {
      Eigen::Map<Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          dst, static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w)) = img[c] / 255.0;
      dst += h * w;
    }
  }
  return out;
}

template <class Fn>
std::vector<double> batched(std::span<const Sample> samples, std::size_t batch_size, Fn&& fn) {
  std::vector<double> out;
  out.reserve(samples.size());
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t i = 0; i < samples.size(); i += batch_size) {
    const Tensor y = fn(samples.subspan(i, std::min(batch_size, samples.size() - i)));
    out.insert(out.end(), y.data(), y.data() + y.size());
  }
  return out;
}

}  // namespace

BranchConfig BranchConfig::desk() {
  BranchConfig cfg;
  for (std::size_t c : {16, 32, 64, 128}) cfg.blocks.push_back({c, 3, 2, 1});
  return cfg;
}

void BranchConfig::validate() const {
  if (blocks.empty()) throw UsageError("branch config needs at least one conv block");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const ConvBlock& b = blocks[i];
    if (b.out_channels == 0 || b.kernel == 0 || b.stride == 0) {
      throw UsageError("conv block " + std::to_string(i) + ": channels, kernel and stride must be positive");
    }
  }
}

void TwoStreamConfig::validate() const {
  branch.validate();
  for (std::size_t h : mlp_hidden) {
    if (h == 0) throw UsageError("mlp hidden sizes must be positive");
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw UsageError("dropout_p must lie in [0, 1)");
  std::size_t h = height, w = width;
  for (std::size_t i = 0; i < branch.blocks.size(); ++i) {
    h = conv_out(h, branch.blocks[i]);
    w = conv_out(w, branch.blocks[i]);
    if (h == 0 || w == 0) {
      throw UsageError("input " + std::to_string(height) + "x" + std::to_string(width) +
                       " is too small for conv block " + std::to_string(i));
    }
  }
}

nlohmann::json to_json(const BranchConfig& cfg) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const ConvBlock& b : cfg.blocks) {
    blocks.push_back({{"out_channels", b.out_channels}, {"kernel", b.kernel}, {"stride", b.stride}, {"padding", b.padding}});
  }
  return {{"blocks", blocks}};
}

nlohmann::json to_json(const TwoStreamConfig& cfg) {
  return {{"branch", to_json(cfg.branch)},
          {"mlp_hidden", cfg.mlp_hidden},
          {"dropout_p", cfg.dropout_p},
          {"height", cfg.height},
          {"width", cfg.width},
          {"heads", TwoStreamConfig::kHeads}};
}

BranchConfig branch_config_from_json(const nlohmann::json& j) {
  BranchConfig cfg;
  for (const auto& b : j.at("blocks")) {
    cfg.blocks.push_back({b.at("out_channels").get<std::size_t>(), b.at("kernel").get<std::size_t>(),
                          b.at("stride").get<std::size_t>(), b.at("padding").get<std::size_t>()});
  }
  return cfg;
}

TwoStreamConfig two_stream_config_from_json(const nlohmann::json& j) {
  TwoStreamConfig cfg;
  cfg.branch = branch_config_from_json(j.at("branch"));
  cfg.mlp_hidden = j.at("mlp_hidden").get<std::vector<std::size_t>>();
  cfg.dropout_p = j.at("dropout_p").get<double>();
  cfg.height = j.at("height").get<std::size_t>();
  cfg.width = j.at("width").get<std::size_t>();
  return cfg;
}

std::string to_string(Stream stream) { return stream == Stream::kSpatial ? "spatial" : "temporal"; }

Stream parse_stream(const std::string& text) {
  if (text == "spatial") return Stream::kSpatial;
  if (text == "temporal") return Stream::kTemporal;
  throw UsageError("unknown stream '" + text + "' (expected spatial or temporal)");
}

Branch::Branch(const BranchConfig& cfg, std::size_t in_channels, std::string prefix, Rng& rng)
    : cfg_(cfg), prefix_(std::move(prefix)) {
  cfg_.validate();
  std::size_t cin = in_channels;
  for (std::size_t i = 0; i < cfg_.blocks.size(); ++i) {
    const ConvBlock& b = cfg_.blocks[i];
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * b.kernel * b.kernel));
    const std::string base = prefix_ + ".conv" + std::to_string(i);
    weights_.push_back({base + ".weight", uniform_tensor({b.out_channels, cin, b.kernel, b.kernel}, bound, rng)});
    biases_.push_back({base + ".bias", uniform_tensor({b.out_channels}, bound, rng)});
    cin = b.out_channels;
  }
}

Tensor Branch::embed(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < cfg_.blocks.size(); ++i) {
    const ConvBlock& b = cfg_.blocks[i];
    h = relu(conv2d(h, weights_[i].value, biases_[i].value, b.stride, b.padding));
  }
  return global_avg_pool(h);
}

void Branch::collect(std::vector<Parameter*>& out) {
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.push_back(&weights_[i]);
    out.push_back(&biases_[i]);
  }
}

Tensor frames_to_tensor(std::span<const Sample> samples) { return images_to_tensor(samples, &Sample::frame); }
Tensor flows_to_tensor(std::span<const Sample> samples) { return images_to_tensor(samples, &Sample::flow_rgb); }

TwoStreamModel build_model(const TwoStreamConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TwoStreamModel m;
  m.cfg_ = cfg;
  Rng rng(seed);
  m.spatial_ = Branch(cfg.branch, 3, "spatial", rng);
  m.temporal_ = Branch(cfg.branch, 3, "temporal", rng);
  std::size_t din = cfg.branch.embedding_dim();
  std::vector<std::size_t> sizes = cfg.mlp_hidden;
  sizes.push_back(TwoStreamConfig::kHeads);
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(din));
    const std::string base = "mlp" + std::to_string(i);
    m.mlp_weights_.push_back({base + ".weight", uniform_tensor({sizes[i], din}, bound, rng)});
    m.mlp_biases_.push_back({base + ".bias", uniform_tensor({sizes[i]}, bound, rng)});
    din = sizes[i];
  }
  return m;
}

Tensor TwoStreamModel::head(const Tensor& fused, bool training, std::uint64_t dropout_seed) const {
  Tensor h = fused;
  const std::size_t last = mlp_weights_.size() - 1;
  for (std::size_t i = 0; i < last; ++i) {
    h = relu(dense(h, mlp_weights_[i].value, mlp_biases_[i].value));
    h = dropout(h, cfg_.dropout_p, training, mix_seed(dropout_seed, i));
  }
  return dense(h, mlp_weights_[last].value, mlp_biases_[last].value);
}

TwoStreamModel::Output TwoStreamModel::forward(const Tensor& frames, const Tensor& flows, bool training,
                                               std::uint64_t dropout_seed) const {
  check_input(frames, cfg_.height, cfg_.width, "frames");
  check_input(flows, cfg_.height, cfg_.width, "flows");
  if (frames.dim(0) != flows.dim(0)) {
    throw ShapeError("frames and flows batch sizes differ (dim 0): " + std::to_string(frames.dim(0)) + " vs " +
                     std::to_string(flows.dim(0)));
  }
  const Tensor e_s = spatial_.embed(frames);
  const Tensor e_t = temporal_override_ ? temporal_override_(flows) : temporal_.embed(flows);
  const Tensor y = head(elementwise_mul(e_s, e_t), training, dropout_seed);
  return {select_column(y, 0), select_column(y, 1)};
}

std::vector<double> TwoStreamModel::predict(std::span<const Sample> samples, std::size_t batch_size) const {
  return batched(samples, batch_size, [&](std::span<const Sample> batch) {
    return forward(frames_to_tensor(batch), flows_to_tensor(batch), false).main;
  });
}

double TwoStreamModel::predict(const Sample& sample) const { return predict(std::span(&sample, 1)).front(); }

std::vector<Parameter*> TwoStreamModel::parameters() {
  std::vector<Parameter*> out;
  spatial_.collect(out);
  temporal_.collect(out);
  for (std::size_t i = 0; i < mlp_weights_.size(); ++i) {
    out.push_back(&mlp_weights_[i]);
    out.push_back(&mlp_biases_[i]);
  }
  return out;
}

std::vector<const Parameter*> TwoStreamModel::parameters() const {
  auto params = const_cast<TwoStreamModel*>(this)->parameters();
  return {params.begin(), params.end()};
}

std::size_t TwoStreamModel::param_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.size();
  return n;
}

BranchRegressor::BranchRegressor(Stream stream, const BranchConfig& cfg, std::size_t height, std::size_t width,
                                 std::uint64_t seed)
    : stream_(stream), height_(height), width_(width) {
  TwoStreamConfig probe;
  probe.branch = cfg;
  probe.height = height;
  probe.width = width;
  probe.validate();
  Rng rng(seed);
  branch_ = Branch(cfg, 3, to_string(stream), rng);
  const std::size_t din = cfg.embedding_dim();
  const double bound = 1.0 / std::sqrt(static_cast<double>(din));
  head_weight_ = {"head.weight", uniform_tensor({1, din}, bound, rng)};
  head_bias_ = {"head.bias", uniform_tensor({1}, bound, rng)};
}

Tensor BranchRegressor::forward(const Tensor& x) const {
  check_input(x, height_, width_, to_string(stream_).c_str());
  return select_column(dense(branch_.embed(x), head_weight_.value, head_bias_.value), 0);
}

Tensor BranchRegressor::input(std::span<const Sample> samples) const {
  return stream_ == Stream::kSpatial ? frames_to_tensor(samples) : flows_to_tensor(samples);
}

std::vector<double> BranchRegressor::predict(std::span<const Sample> samples, std::size_t batch_size) const {
  return batched(samples, batch_size, [&](std::span<const Sample> batch) { return forward(input(batch)); });
}

std::vector<Parameter*> BranchRegressor::parameters() {
  std::vector<Parameter*> out;
  branch_.collect(out);
  out.push_back(&head_weight_);
  out.push_back(&head_bias_);
  return out;
}

std::vector<const Parameter*> BranchRegressor::parameters() const {
  auto params = const_cast<BranchRegressor*>(this)->parameters();
  return {params.begin(), params.end()};
}

std::size_t BranchRegressor::param_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.size();
  return n;
}

}  // namespace tsnet
