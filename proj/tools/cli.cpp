#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <ostream>
#include <thread>

#include "tsnet/dataset.hpp"
#include "tsnet/error.hpp"
#include "tsnet/gradcheck.hpp"
#include "tsnet/metrics.hpp"
#include "tsnet/model.hpp"
#include "tsnet/optflow.hpp"
#include "tsnet/rng.hpp"
#include "tsnet/trainer.hpp"

namespace tsnet::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct SynthArgs {
  fs::path out;
  SynthConfig cfg;
  bool force = false;
};

struct FlowArgs {
  fs::path data;
  fs::path out;
  fs::path viz;
  FlowParams params;
};

struct TrainArgs {
  int stage = 1;
  std::string stream;
  fs::path data;
  fs::path flows;
  fs::path out;
  fs::path report;
  fs::path spatial_ckpt;
  fs::path temporal_ckpt;
  std::optional<double> lr;
  std::optional<std::size_t> batch;
  std::optional<std::size_t> epochs;
  double lambda = 1.0;
  std::uint64_t seed = 0;
  double split = 0.6;
  bool no_augment = false;
  bool no_freeze = false;
  std::vector<std::size_t> channels{16, 32, 64, 128};
  std::vector<std::size_t> hidden{64};
  double dropout = 0.2;
};

struct EvalArgs {
  fs::path data;
  fs::path flows;
  fs::path out;
  fs::path spatial_ckpt;
  fs::path temporal_ckpt;
  fs::path two_stream_ckpt;
  std::optional<double> dt;
};

struct GradCheckArgs {
  int trials = 20;
  std::uint64_t seed = 1;
  fs::path out;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
  if (!f) throw DataError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

bool is_within(const fs::path& child, const fs::path& parent) {
  const fs::path c = fs::weakly_canonical(fs::absolute(child));
  const fs::path p = fs::weakly_canonical(fs::absolute(parent));
  auto [pe, ce] = std::mismatch(p.begin(), p.end(), c.begin(), c.end());
  return pe == p.end() || (std::next(pe) == p.end() && pe->empty());
}

// Outputs never land inside (or on top of) an input.
void require_separate(const fs::path& output, const std::vector<fs::path>& inputs) {
  for (const auto& in : inputs) {
    if (in.empty()) continue;
    if (is_within(output, in)) {
      throw UsageError("output " + output.string() + " would overwrite input " + in.string());
    }
  }
}

int thread_count() {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("TSNET_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || cap < 1) throw UsageError("TSNET_THREADS must be a positive integer");
    n = std::min<long>(n, cap);
  }
  return n;
}

void echo(std::ostream& out, const std::string& command, const json& config) {
  out << json{{"command", command}, {"config", config}}.dump() << std::endl;
}

json path_json(const fs::path& p) { return p.empty() ? json() : json(p.string()); }

bool is_synth_file(const fs::path& p) {
  const std::string name = p.filename().string();
  if (name == "steering.csv" || name == "meta.json") return true;
  const std::string ext = p.extension().string();
  return name.rfind("frame_", 0) == 0 && (ext == ".ppm" || ext == ".png");
}

// ---------------------------------------------------------------------------

int cmd_synth(const SynthArgs& a, std::ostream& out, std::ostream&) {
  a.cfg.validate();
  echo(out, "synth", {{"out", a.out.string()}, {"force", a.force}, {"synth", to_json(a.cfg)}});
  if (fs::exists(a.out) && !fs::is_directory(a.out)) throw UsageError(a.out.string() + " exists and is not a directory");
  if (fs::exists(a.out) && !fs::is_empty(a.out)) {
    if (!a.force) throw UsageError("output directory " + a.out.string() + " is not empty; pass --force to regenerate");
    std::vector<fs::path> stale;
    for (const auto& entry : fs::directory_iterator(a.out)) {
      if (entry.is_regular_file() && is_synth_file(entry.path())) stale.push_back(entry.path());
    }
    for (const auto& p : stale) fs::remove(p);
  }
  synth_generate(a.cfg, a.out);
  const DrivingSequence seq = load_sequence(a.out);
  out << json{{"frames", seq.size()},
              {"width", seq.width},
              {"height", seq.height},
              {"sample_rate_hz", seq.sample_rate_hz},
              {"fingerprint", seq.fingerprint}}
             .dump()
      << std::endl;
  return 0;
}

json flow_params_json(const FlowParams& p) {
  return {{"pyramid_scale", p.pyramid_scale}, {"levels", p.levels},         {"window_size", p.window_size},
          {"iterations", p.iterations},       {"poly_n", p.poly_n},         {"poly_sigma", p.poly_sigma}};
}

int cmd_flow(const FlowArgs& a, std::ostream& out, std::ostream& err) {
  a.params.validate();
  const int threads = thread_count();
  echo(out, "flow",
       {{"data", a.data.string()},
        {"out", a.out.string()},
        {"viz", path_json(a.viz)},
        {"threads", threads},
        {"params", flow_params_json(a.params)}});
  require_separate(a.out, {a.data});
  if (!a.viz.empty()) require_separate(a.viz, {a.data, a.out});
  const auto t0 = Clock::now();
  const DrivingSequence seq = load_sequence(a.data);
  const FlowCache cache = precompute_flows(seq, a.params, a.out, threads);
  std::size_t written = 0;
  if (!a.viz.empty()) {
    fs::create_directories(a.viz);
    for (std::size_t i = 0; i < cache.n_pairs; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "flow_%06zu.png", i);
      write_png(a.viz / name, encode_flow_rgb(cache.load(i), cache.max_magnitude));
      ++written;
    }
  }
  err << "flow: " << cache.n_pairs << " pairs in " << std::chrono::duration<double>(Clock::now() - t0).count()
      << " s\n";
  out << json{{"pairs", cache.n_pairs}, {"flow_max_magnitude", cache.max_magnitude}, {"viz_images", written}}.dump()
      << std::endl;
  return 0;
}

BranchConfig branch_from_channels(const std::vector<std::size_t>& channels) {
  BranchConfig b;
  for (std::size_t c : channels) b.blocks.push_back({c, 3, 2, 1});
  return b;
}

TrainConfig resolve_train_config(const TrainArgs& a, Rng& rng) {
  TrainConfig cfg = TrainConfig::paper(a.stage);
  if (a.lr) cfg.learning_rate = *a.lr;
  if (a.batch) cfg.batch_size = *a.batch;
  if (a.epochs) cfg.epochs = *a.epochs;
  cfg.mtl_lambda = a.lambda;
  cfg.augment = !a.no_augment;
  cfg.freeze_branches = !a.no_freeze;
  cfg.seed = rng.next();
  cfg.shuffle_seed = rng.next();
  cfg.validate();
  return cfg;
}

fs::path report_path(const TrainArgs& a) {
  if (!a.report.empty()) return a.report;
  fs::path p = a.out;
  return p.replace_extension(".report.json");
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  if (a.stage != 1 && a.stage != 2) throw UsageError("--stage must be 1 or 2");
  if (!(a.split > 0.0 && a.split < 1.0)) throw UsageError("--split must lie in (0, 1)");
  if (a.stage == 1 && a.stream.empty()) throw UsageError("stage 1 needs --stream spatial|temporal");
  if (a.stage == 2 && (a.spatial_ckpt.empty() || a.temporal_ckpt.empty())) {
    throw UsageError("stage 2 needs both --spatial-ckpt and --temporal-ckpt");
  }
  Rng rng(a.seed);
  const TrainConfig cfg = resolve_train_config(a, rng);
  const fs::path report_file = report_path(a);
  json config = {{"stage", a.stage},
                 {"data", a.data.string()},
                 {"flows", a.flows.string()},
                 {"out", a.out.string()},
                 {"report", report_file.string()},
                 {"seed", a.seed},
                 {"split", a.split},
                 {"train", to_json(cfg)}};
  const std::vector<fs::path> inputs = {a.data, a.flows, a.spatial_ckpt, a.temporal_ckpt};
  require_separate(a.out, inputs);
  require_separate(report_file, inputs);
  if (report_file == a.out) throw UsageError("--report must differ from --out");

  const DrivingSequence seq = load_sequence(a.data);
  const FlowCache cache = open_flow_cache(a.flows);
  const auto t0 = Clock::now();

  if (a.stage == 1) {
    const Stream stream = parse_stream(a.stream);
    const BranchConfig branch = branch_from_channels(a.channels);
    branch.validate();
    config["stream"] = a.stream;
    config["branch"] = to_json(branch);
    echo(out, "train", config);
    const std::vector<Sample> samples = make_samples(seq, cache, cache.max_magnitude);
    const auto part = stage_split(samples, a.split).first;
    BranchTraining result = train_branch(stream, part, branch, cfg);
    result.info.data_fingerprint = seq.fingerprint;
    result.info.flow_max_magnitude = cache.max_magnitude;
    result.info.extra["seed"] = a.seed;
    result.info.extra["split"] = a.split;
    result.info.extra["samples"] = part.size();
    write_checkpoint(a.out, make_checkpoint(result.model, result.info));
    result.report.checkpoint = a.out.filename().string();
    write_json(report_file, result.report.to_json());
    err << "train: stage 1 " << a.stream << " took " << result.report.wall_time_s << " s\n";
    out << json{{"final_loss", result.report.final_loss}, {"samples", part.size()}}.dump() << std::endl;
    return 0;
  }

  const Checkpoint spatial = read_checkpoint(a.spatial_ckpt);
  const Checkpoint temporal = read_checkpoint(a.temporal_ckpt);
  const BranchRegressor spatial_branch = branch_from_checkpoint(spatial);
  TwoStreamConfig model_cfg;
  model_cfg.branch = spatial_branch.config();
  model_cfg.height = spatial_branch.height();
  model_cfg.width = spatial_branch.width();
  model_cfg.mlp_hidden = a.hidden;
  model_cfg.dropout_p = a.dropout;
  model_cfg.validate();
  const CheckpointInfo temporal_info = checkpoint_info(temporal);
  const double max_magnitude = temporal_info.flow_max_magnitude.value_or(cache.max_magnitude);
  config["spatial_ckpt"] = a.spatial_ckpt.string();
  config["temporal_ckpt"] = a.temporal_ckpt.string();
  config["model"] = to_json(model_cfg);
  config["flow_max_magnitude"] = max_magnitude;
  const std::uint64_t init_seed = rng.next();
  config["init_seed"] = init_seed;
  echo(out, "train", config);

  const std::vector<Sample> samples = make_samples(seq, cache, max_magnitude);
  const auto part = stage_split(samples, a.split).second;
  TwoStreamTraining result = fine_tune(init_from_stage1(model_cfg, spatial, temporal, init_seed), part, cfg);
  result.info.data_fingerprint = seq.fingerprint;
  result.info.flow_max_magnitude = max_magnitude;
  result.info.extra["seed"] = a.seed;
  result.info.extra["split"] = a.split;
  result.info.extra["samples"] = part.size();
  write_checkpoint(a.out, make_checkpoint(result.model, result.info));
  result.report.checkpoint = a.out.filename().string();
  write_json(report_file, result.report.to_json());
  err << "train: stage 2 took " << std::chrono::duration<double>(Clock::now() - t0).count() << " s\n";
  out << json{{"final_loss", result.report.final_loss}, {"samples", part.size()}}.dump() << std::endl;
  return 0;
}

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream&) {
  if (a.spatial_ckpt.empty() && a.temporal_ckpt.empty() && a.two_stream_ckpt.empty()) {
    throw UsageError("eval needs at least one of --spatial-ckpt, --temporal-ckpt, --two-stream-ckpt");
  }
  require_separate(a.out, {a.data, a.flows, a.spatial_ckpt, a.temporal_ckpt, a.two_stream_ckpt});
  const DrivingSequence seq = load_sequence(a.data);
  const FlowCache cache = open_flow_cache(a.flows);
  const double dt = a.dt.value_or(1.0 / seq.sample_rate_hz);
  if (!(dt > 0.0)) throw UsageError("--dt must be positive");
  echo(out, "eval",
       {{"data", a.data.string()},
        {"flows", a.flows.string()},
        {"out", a.out.string()},
        {"spatial_ckpt", path_json(a.spatial_ckpt)},
        {"temporal_ckpt", path_json(a.temporal_ckpt)},
        {"two_stream_ckpt", path_json(a.two_stream_ckpt)},
        {"dt", dt}});

  struct Entry {
    std::string name;
    std::string flag;
    fs::path path;
  };
  const std::vector<Entry> entries = {{"spatial", "--spatial-ckpt", a.spatial_ckpt},
                                      {"temporal", "--temporal-ckpt", a.temporal_ckpt},
                                      {"two_stream", "--two-stream-ckpt", a.two_stream_ckpt}};
  std::vector<std::pair<std::string, Checkpoint>> loaded;
  for (const auto& e : entries) {
    if (e.path.empty()) continue;
    Checkpoint ckpt = read_checkpoint(e.path);
    const std::string expected = e.name == "two_stream" ? "two_stream" : "branch";
    if (ckpt.kind != expected) throw DataError(e.flag + " expects a " + expected + " checkpoint, found " + ckpt.kind);
    check_leakage(checkpoint_info(ckpt).data_fingerprint, seq.fingerprint);
    loaded.emplace_back(e.name, std::move(ckpt));
  }

  fs::create_directories(a.out);
  std::vector<ExperimentRow> rows;
  json summary = json::array();
  for (const auto& [name, ckpt] : loaded) {
    const CheckpointInfo info = checkpoint_info(ckpt);
    const std::vector<Sample> samples = make_samples(seq, cache, info.flow_max_magnitude.value_or(cache.max_magnitude));
    EvalReport report;
    if (ckpt.kind == "two_stream") {
      report = evaluate(two_stream_from_checkpoint(ckpt), std::span<const Sample>(samples), dt);
    } else {
      const BranchRegressor model = branch_from_checkpoint(ckpt);
      if (to_string(model.stream()) != name) {
        throw DataError("--" + name + "-ckpt holds a " + to_string(model.stream()) + " branch");
      }
      report = evaluate(model, std::span<const Sample>(samples), dt);
    }
    report.scatter_path = "scatter_" + name + ".csv";
    write_scatter_csv(a.out / report.scatter_path, report);
    json j = report.to_json();
    j["model"] = name;
    j["stage"] = ckpt.stage;
    write_json(a.out / ("eval_" + name + ".json"), j);
    rows.push_back({name, report.rmse_deg, report.whiteness});
    summary.push_back({{"model", name}, {"rmse_deg", report.rmse_deg}, {"whiteness", report.whiteness}});
  }
  write_table_csv(a.out / "comparison.csv", rows);
  out << json{{"models", summary}, {"reference_human_whiteness", kHumanWhiteness}}.dump() << std::endl;
  return 0;
}

int cmd_gradcheck(const GradCheckArgs& a, std::ostream& out, std::ostream& err) {
  GradCheckOptions opt;
  opt.trials = a.trials;
  opt.seed = a.seed;
  if (opt.trials < 1) throw UsageError("--trials must be positive");
  echo(out, "gradcheck",
       {{"trials", opt.trials}, {"seed", opt.seed}, {"eps", opt.eps}, {"tolerance", opt.tolerance}, {"out", path_json(a.out)}});
  const GradCheckReport report = run_gradcheck_suite(opt);
  const json j = report.to_json();
  if (!a.out.empty()) write_json(a.out, j);
  out << j.dump(2) << std::endl;
  if (!report.passed()) {
    for (const auto& e : report.entries) {
      if (!e.passed) err << "gradcheck: " << e.name << " max relative error " << e.max_rel_error << "\n";
    }
    throw NumericalError("gradient check failed above " + std::to_string(opt.tolerance));
  }
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-stream steering regression: synthesis, optical flow, training and evaluation."};
  app.name("tsnet");
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic lane-marking drive");
  s->add_option("-o,--out", synth.out, "Output dataset directory")->required();
  s->add_option("--frames", synth.cfg.n_frames, "Number of frames")->capture_default_str();
  s->add_option("--seed", synth.cfg.seed, "Generator seed")->capture_default_str();
  s->add_option("--width", synth.cfg.width)->capture_default_str();
  s->add_option("--height", synth.cfg.height)->capture_default_str();
  s->add_option("--k1", synth.cfg.k1, "Angle per px of offset")->capture_default_str();
  s->add_option("--k2", synth.cfg.k2, "Angle per px/frame of lateral speed")->capture_default_str();
  s->add_option("--offset", synth.cfg.offset, "Constant band offset in px")->capture_default_str();
  s->add_option("--amplitude-min", synth.cfg.amplitude_min)->capture_default_str();
  s->add_option("--amplitude-max", synth.cfg.amplitude_max)->capture_default_str();
  s->add_option("--dash-speed", synth.cfg.dash_speed, "Dash scroll in rows per frame")->capture_default_str();
  s->add_flag("--force", synth.force, "Replace an existing dataset");

  FlowArgs flow;
  auto* f = app.add_subcommand("flow", "Precompute the optical-flow cache of a dataset");
  f->add_option("--data", flow.data, "Dataset directory")->required();
  f->add_option("-o,--out", flow.out, "Flow cache directory")->required();
  f->add_option("--viz", flow.viz, "Also write colour-wheel PNGs here");
  f->add_option("--pyramid-scale", flow.params.pyramid_scale)->capture_default_str();
  f->add_option("--levels", flow.params.levels)->capture_default_str();
  f->add_option("--window", flow.params.window_size)->capture_default_str();
  f->add_option("--iterations", flow.params.iterations)->capture_default_str();
  f->add_option("--poly-n", flow.params.poly_n)->capture_default_str();
  f->add_option("--poly-sigma", flow.params.poly_sigma)->capture_default_str();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Stage 1 (one branch) or stage 2 (two-stream fine-tuning)");
  t->add_option("--stage", train.stage)->required()->check(CLI::IsMember({1, 2}));
  t->add_option("--stream", train.stream, "Stage 1 branch")->check(CLI::IsMember({"spatial", "temporal"}));
  t->add_option("--data", train.data, "Training dataset directory")->required();
  t->add_option("--flows", train.flows, "Flow cache of the training dataset")->required();
  t->add_option("-o,--out", train.out, "Checkpoint to write")->required();
  t->add_option("--report", train.report, "Stage report JSON (default: <out>.report.json)");
  t->add_option("--spatial-ckpt", train.spatial_ckpt, "Stage-1 spatial checkpoint");
  t->add_option("--temporal-ckpt", train.temporal_ckpt, "Stage-1 temporal checkpoint");
  t->add_option("--lr", train.lr, "Learning rate (default 1e-4 stage 1, 0.5e-4 stage 2)");
  t->add_option("--batch", train.batch, "Batch size (default 64 stage 1, 8 stage 2)");
  t->add_option("--epochs", train.epochs, "Epochs (default 30 stage 1, 1 stage 2)");
  t->add_option("--lambda", train.lambda, "Weight of the auxiliary loss")->capture_default_str();
  t->add_option("--seed", train.seed)->capture_default_str();
  t->add_option("--split", train.split, "Fraction of samples used by stage 1")->capture_default_str();
  t->add_flag("--no-augment", train.no_augment);
  t->add_flag("--no-freeze", train.no_freeze, "Stage 2 also updates the branches");
  t->add_option("--channels", train.channels, "Conv channels per block")->delimiter(',')->capture_default_str();
  t->add_option("--hidden", train.hidden, "MLP hidden widths")->delimiter(',')->capture_default_str();
  t->add_option("--dropout", train.dropout)->capture_default_str();

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Score checkpoints on a held-out dataset");
  e->add_option("--data", eval.data, "Test dataset directory")->required();
  e->add_option("--flows", eval.flows, "Flow cache of the test dataset")->required();
  e->add_option("-o,--out", eval.out, "Output directory for reports and CSVs")->required();
  e->add_option("--spatial-ckpt", eval.spatial_ckpt);
  e->add_option("--temporal-ckpt", eval.temporal_ckpt);
  e->add_option("--two-stream-ckpt", eval.two_stream_ckpt);
  e->add_option("--dt", eval.dt, "Seconds between frames (default: 1 / sample rate)");

  GradCheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of every op and the full model loss");
  g->add_option("--trials", gc.trials)->capture_default_str();
  g->add_option("--seed", gc.seed)->capture_default_str();
  g->add_option("-o,--out", gc.out, "Also write the report here");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (*s) return cmd_synth(synth, out, err);
    if (*f) return cmd_flow(flow, out, err);
    if (*t) return cmd_train(train, out, err);
    if (*e) return cmd_eval(eval, out, err);
    if (*g) return cmd_gradcheck(gc, out, err);
  } catch (const Error& ex) {
    err << "error: " << ex.what() << "\n";
    return static_cast<int>(ex.code());
  } catch (const fs::filesystem_error& ex) {
    err << "error: " << ex.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  } catch (const json::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  }
  return static_cast<int>(ExitCode::kUsage);
}

}  // namespace tsnet::cli
