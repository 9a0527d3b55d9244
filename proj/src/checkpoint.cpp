#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "tsnet/error.hpp"
#include "tsnet/model.hpp"

namespace tsnet {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'T', 'S', 'N', 'E', 'T', '0', '0', '1'};
constexpr const char* kAdamM = "adam.m.";
constexpr const char* kAdamV = "adam.v.";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(std::string bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw DataError(origin_ + ": checkpoint truncated while reading " + what + " at byte " + std::to_string(pos_));
    }
    std::string_view out(bytes_.data() + pos_, n);
    pos_ += n;
    return out;
  }

  std::uint32_t u32(const char* what) {
    const auto b = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
    return v;
  }

  double f64(const char* what) {
    const auto b = take(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
    return std::bit_cast<double>(v);
  }

 private:
  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

template <class P>
std::vector<std::pair<std::string, Tensor>> param_tensors(const std::vector<P>& params) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto* p : params) out.emplace_back(p->name, p->value.detach());
  return out;
}

nlohmann::json base_header(const std::string& kind, const CheckpointInfo& info) {
  nlohmann::json h = {{"format", "TSNET001"},
                      {"kind", kind},
                      {"stage", info.stage},
                      {"rng_state", info.rng_state},
                      {"data_fingerprint", info.data_fingerprint},
                      {"extra", info.extra}};
  h["flow_max_magnitude"] = info.flow_max_magnitude ? nlohmann::json(*info.flow_max_magnitude) : nlohmann::json();
  if (info.optimizer) {
    h["optimizer"] = {{"kind", "adam"}, {"step", info.optimizer->step}};
    if (!info.optimizer->states.empty()) {
      const AdamState& s = info.optimizer->states.front().second;
      h["optimizer"]["beta1"] = s.beta1;
      h["optimizer"]["beta2"] = s.beta2;
      h["optimizer"]["epsilon"] = s.epsilon;
    }
  }
  return h;
}

void append_optimizer(Checkpoint& ckpt, const CheckpointInfo& info) {
  if (!info.optimizer) return;
  for (const auto& [name, state] : info.optimizer->states) {
    const auto n = static_cast<std::size_t>(state.m.size());
    ckpt.tensors.emplace_back(kAdamM + name, Tensor({n}, state.m));
    ckpt.tensors.emplace_back(kAdamV + name, Tensor({n}, state.v));
  }
}

[[noreturn]] void incompatible(const std::string& why) { throw DataError("checkpoint incompatible: " + why); }

void require_kind(const Checkpoint& ckpt, const std::string& kind) {
  if (ckpt.kind != kind) incompatible("expected a " + kind + " checkpoint, found " + ckpt.kind);
}

template <class P>
void assign_all(const std::vector<P*>& params, const Checkpoint& ckpt) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : ckpt.tensors) by_name[name] = &t;
  for (P* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) incompatible("missing tensor " + p->name);
    if (it->second->shape() != p->value.shape()) {
      incompatible(p->name + " has shape " + to_string(it->second->shape()) + ", model expects " +
                   to_string(p->value.shape()));
    }
    p->value.values() = it->second->values();
  }
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  nlohmann::json header = ckpt.header;
  header["kind"] = ckpt.kind;
  header["stage"] = ckpt.stage;
  const std::string text = header.dump();
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& [name, t] : ckpt.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) put_f64(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("checkpoint not found: " + path.string());
  Reader in(read_file(path), path.string());
  std::string_view magic;
  try {
    magic = in.take(sizeof kMagic, "magic");
  } catch (const DataError&) {
    throw DataError(path.string() + ": bad checkpoint magic (file shorter than 8 bytes)");
  }
  if (magic != std::string_view(kMagic, sizeof kMagic)) {
    throw DataError(path.string() + ": bad checkpoint magic (expected TSNET001)");
  }
  const std::uint32_t header_len = in.u32("header length");
  const std::string_view text = in.take(header_len, "header");
  Checkpoint ckpt;
  try {
    ckpt.header = nlohmann::json::parse(text);
    ckpt.kind = ckpt.header.at("kind").get<std::string>();
    ckpt.stage = ckpt.header.at("stage").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  while (!in.done()) {
    const std::uint32_t name_len = in.u32("tensor name length");
    std::string name(in.take(name_len, "tensor name"));
    const std::uint32_t rank = in.u32("tensor rank");
    if (rank > 8) throw DataError(path.string() + ": tensor " + name + " has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = in.u32("tensor dims");
    const std::size_t n = numel(shape);
    Vector values(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) values[static_cast<Eigen::Index>(i)] = in.f64("tensor values");
    ckpt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return ckpt;
}

Checkpoint make_checkpoint(const TwoStreamModel& model, const CheckpointInfo& info) {
  Checkpoint ckpt;
  ckpt.kind = "two_stream";
  ckpt.stage = info.stage;
  ckpt.header = base_header(ckpt.kind, info);
  ckpt.header["config"] = to_json(model.config());
  ckpt.tensors = param_tensors(model.parameters());
  append_optimizer(ckpt, info);
  return ckpt;
}

Checkpoint make_checkpoint(const BranchRegressor& model, const CheckpointInfo& info) {
  Checkpoint ckpt;
  ckpt.kind = "branch";
  ckpt.stage = info.stage;
  ckpt.header = base_header(ckpt.kind, info);
  ckpt.header["config"] = {{"stream", to_string(model.stream())},
                           {"branch", to_json(model.config())},
                           {"height", model.height()},
                           {"width", model.width()},
                           {"temporary", {"head.weight", "head.bias"}}};
  ckpt.tensors = param_tensors(model.parameters());
  append_optimizer(ckpt, info);
  return ckpt;
}

CheckpointInfo checkpoint_info(const Checkpoint& ckpt) {
  CheckpointInfo info;
  const auto& h = ckpt.header;
  info.stage = ckpt.stage;
  info.rng_state = h.value("rng_state", "");
  info.data_fingerprint = h.value("data_fingerprint", "");
  if (h.contains("extra")) info.extra = h["extra"];
  if (h.contains("flow_max_magnitude") && !h["flow_max_magnitude"].is_null()) {
    info.flow_max_magnitude = h["flow_max_magnitude"].get<double>();
  }
  if (h.contains("optimizer")) {
    OptimizerSnapshot snap;
    const auto& o = h["optimizer"];
    snap.step = o.at("step").get<std::int64_t>();
    for (const auto& [name, t] : ckpt.tensors) {
      if (name.rfind(kAdamM, 0) != 0) continue;
      const std::string param = name.substr(std::strlen(kAdamM));
      const Tensor* v = ckpt.find(kAdamV + param);
      if (!v) throw DataError("checkpoint optimizer state lacks " + std::string(kAdamV) + param);
      AdamState s;
      s.m = t.values();
      s.v = v->values();
      s.step = snap.step;
      s.beta1 = o.value("beta1", s.beta1);
      s.beta2 = o.value("beta2", s.beta2);
      s.epsilon = o.value("epsilon", s.epsilon);
      snap.states.emplace_back(param, std::move(s));
    }
    info.optimizer = std::move(snap);
  }
  return info;
}

TwoStreamModel two_stream_from_checkpoint(const Checkpoint& ckpt) {
  require_kind(ckpt, "two_stream");
  TwoStreamConfig cfg;
  try {
    cfg = two_stream_config_from_json(ckpt.header.at("config"));
  } catch (const nlohmann::json::exception& e) {
    incompatible(std::string("unreadable model config: ") + e.what());
  }
  TwoStreamModel model = build_model(cfg, 0);
  assign_all(model.parameters(), ckpt);
  return model;
}

BranchRegressor branch_from_checkpoint(const Checkpoint& ckpt) {
  require_kind(ckpt, "branch");
  Stream stream;
  BranchConfig cfg;
  std::size_t height = 0, width = 0;
  try {
    const auto& c = ckpt.header.at("config");
    stream = parse_stream(c.at("stream").get<std::string>());
    cfg = branch_config_from_json(c.at("branch"));
    height = c.at("height").get<std::size_t>();
    width = c.at("width").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    incompatible(std::string("unreadable branch config: ") + e.what());
  }
  BranchRegressor model(stream, cfg, height, width, 0);
  assign_all(model.parameters(), ckpt);
  return model;
}

std::vector<std::string> load_matching(TwoStreamModel& model, const Checkpoint& source) {
  std::vector<std::string> copied;
  for (Parameter* p : model.parameters()) {
    const Tensor* t = source.find(p->name);
    if (!t) continue;
    if (t->shape() != p->value.shape()) {
      incompatible(p->name + " has shape " + to_string(t->shape()) + ", model expects " + to_string(p->value.shape()));
    }
    p->value.values() = t->values();
    copied.push_back(p->name);
  }
  return copied;
}

}  // namespace tsnet
