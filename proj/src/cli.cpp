#include "mintnet/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "mintnet/checkpoint.hpp"
#include "mintnet/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mintnet::cli {

namespace {

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& section) {
  if (!obj.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
    }
  }
}

template <class T>
void read(const json& obj, const char* key, T& dst, const std::string& section) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + section + "." + key + "' has the wrong type: " + obj.at(key).dump());
  }
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  check_keys(j, {"model", "data", "train", "solver", "output"}, "");
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, {"input", "k_groups", "kernel", "pairs_per_stage", "squeezes", "activation", "init_scale", "lambda"},
               "model");
    if (m.contains("input")) {
      std::vector<std::size_t> in;
      read(m, "input", in, "model");
      if (in.size() != 3) throw ConfigError("config key 'model.input' must be [c, h, w]");
      c.model.input = {in[0], in[1], in[2]};
    }
    read(m, "k_groups", c.model.k_groups, "model");
    read(m, "kernel", c.model.kernel, "model");
    read(m, "pairs_per_stage", c.model.pairs_per_stage, "model");
    read(m, "squeezes", c.model.squeezes, "model");
    read(m, "activation", c.model.activation, "model");
    read(m, "init_scale", c.model.init_scale, "model");
    read(m, "lambda", c.model.lambda, "model");
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, {"source", "path", "labels_path", "eval_path", "downsample", "train_count", "eval_count", "seed"},
               "data");
    read(d, "source", c.data.source, "data");
    read(d, "path", c.data.path, "data");
    read(d, "labels_path", c.data.labels_path, "data");
    read(d, "eval_path", c.data.eval_path, "data");
    read(d, "downsample", c.data.downsample, "data");
    read(d, "train_count", c.data.train_count, "data");
    read(d, "eval_count", c.data.eval_count, "data");
    read(d, "seed", c.data.seed, "data");
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, {"steps", "batch_size", "lr", "schedule", "seed", "checkpoint_every", "eval_every", "clip_norm"},
               "train");
    read(t, "steps", c.train.steps, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "lr", c.train.lr0, "train");
    std::string schedule = "cosine";
    read(t, "schedule", schedule, "train");
    if (schedule == "cosine") {
      c.train.schedule = train::Schedule::kCosine;
    } else if (schedule == "constant") {
      c.train.schedule = train::Schedule::kConstant;
    } else {
      throw ConfigError("config key 'train.schedule' must be \"cosine\" or \"constant\", got \"" + schedule + "\"");
    }
    read(t, "seed", c.train.seed, "train");
    read(t, "checkpoint_every", c.train.checkpoint_every, "train");
    read(t, "eval_every", c.train.eval_every, "train");
    read(t, "clip_norm", c.train.clip_norm, "train");
  }
  if (j.contains("solver")) {
    const json& s = j.at("solver");
    check_keys(s, {"alpha", "max_iters", "tol"}, "solver");
    read(s, "alpha", c.solver.alpha, "solver");
    read(s, "max_iters", c.solver.max_iters, "solver");
    read(s, "tol", c.solver.tol, "solver");
  }
  if (j.contains("output")) {
    const json& o = j.at("output");
    check_keys(o, {"dir"}, "output");
    read(o, "dir", c.out_dir, "output");
  }
  return c;
}

json RunConfig::to_json() const {
  return {
      {"model",
       {{"input", {model.input.c, model.input.h, model.input.w}},
        {"k_groups", model.k_groups},
        {"kernel", model.kernel},
        {"pairs_per_stage", model.pairs_per_stage},
        {"squeezes", model.squeezes},
        {"activation", model.activation},
        {"init_scale", model.init_scale},
        {"lambda", model.lambda}}},
      {"data",
       {{"source", data.source},
        {"path", data.path},
        {"labels_path", data.labels_path},
        {"eval_path", data.eval_path},
        {"downsample", data.downsample},
        {"train_count", data.train_count},
        {"eval_count", data.eval_count},
        {"seed", data.seed}}},
      {"train",
       {{"steps", train.steps},
        {"batch_size", train.batch_size},
        {"lr", train.lr0},
        {"schedule", train.schedule == train::Schedule::kCosine ? "cosine" : "constant"},
        {"seed", train.seed},
        {"checkpoint_every", train.checkpoint_every},
        {"eval_every", train.eval_every},
        {"clip_norm", train.clip_norm}}},
      {"solver", {{"alpha", solver.alpha}, {"max_iters", solver.max_iters}, {"tol", solver.tol}}},
      {"output", {{"dir", out_dir}}},
  };
}

FlowArchitecture RunConfig::architecture() const {
  FlowArchitecture a;
  a.input = model.input;
  a.k_groups = model.k_groups;
  a.kernel = model.kernel;
  a.pairs_per_stage = model.pairs_per_stage;
  a.squeezes = model.squeezes;
  try {
    a.activation = Activation::from_name(model.activation);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model.activation: ") + e.what());
  }
  a.init_scale = model.init_scale;
  return a;
}

PreprocessConfig RunConfig::preprocess() const {
  PreprocessConfig p;
  p.lambda = model.lambda;
  return p;
}

void RunConfig::validate() const {
  architecture().validate();
  preprocess().validate();
  train.validate();
  solver.validate();
  if (data.source != "bars" && data.source != "noise" && data.source != "idx") {
    throw ConfigError("data.source must be \"bars\", \"noise\" or \"idx\", got \"" + data.source + "\"");
  }
  if (data.source == "idx" && data.path.empty()) throw ConfigError("data.path is required for idx data");
  if (data.downsample == 0) throw ConfigError("data.downsample must be >= 1");
  if (data.train_count == 0) throw ConfigError("data.train_count must be >= 1");
  if (out_dir.empty()) throw ConfigError("output.dir must not be empty");
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return RunConfig::from_json(j);
}

Splits load_data(const RunConfig& cfg) {
  Splits s;
  const std::size_t size = cfg.model.input.h;
  if (cfg.data.source != "idx" && (cfg.model.input.c != 1 || cfg.model.input.h != cfg.model.input.w)) {
    throw ConfigError("synthetic data is single-channel and square; model.input must be [1, s, s]");
  }
  if (cfg.data.source == "idx") {
    data::Dataset all = data::load_idx(cfg.data.path, cfg.data.labels_path.empty()
                                                          ? std::optional<std::string>{}
                                                          : std::optional<std::string>{cfg.data.labels_path});
    if (cfg.data.downsample > 1) all = data::downsample(all, cfg.data.downsample);
    if (!cfg.data.eval_path.empty()) {
      s.train = std::move(all);
      s.eval = data::load_idx(cfg.data.eval_path);
      if (cfg.data.downsample > 1) s.eval = data::downsample(s.eval, cfg.data.downsample);
    } else {
      if (all.size() <= cfg.data.eval_count) {
        throw ConfigError("data.eval_count " + std::to_string(cfg.data.eval_count) + " leaves no training images in " +
                          cfg.data.path);
      }
      const std::size_t n_train = all.size() - cfg.data.eval_count;
      s.train.images = all.images.slice_batch(0, n_train);
      s.eval.images = all.images.slice_batch(n_train, cfg.data.eval_count);
      s.train.source = s.eval.source = all.source;
    }
    if (s.train.size() > cfg.data.train_count) s.train.images = s.train.images.slice_batch(0, cfg.data.train_count);
  } else {
    std::mt19937_64 rng(cfg.data.seed);
    const std::size_t total = cfg.data.train_count + cfg.data.eval_count;
    data::Dataset all = cfg.data.source == "bars" ? data::synth_bars(total, size, rng) : data::synth_noise(total, size, rng);
    s.train.images = all.images.slice_batch(0, cfg.data.train_count);
    s.eval.images = all.images.slice_batch(cfg.data.train_count, cfg.data.eval_count);
    s.train.source = s.eval.source = all.source;
  }
  s.train.split = "train";
  s.eval.split = "eval";
  const Shape4& sh = s.train.images.shape();
  if (sh.c != cfg.model.input.c || sh.h != cfg.model.input.h || sh.w != cfg.model.input.w) {
    throw ConfigError("data items " + sh.str() + " do not match model.input [" + std::to_string(cfg.model.input.c) +
                      ", " + std::to_string(cfg.model.input.h) + ", " + std::to_string(cfg.model.input.w) + "]");
  }
  return s;
}

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::uint64_t seed = 0;
  double alpha = 1.0;
  std::size_t iters = 120;
  bool refine = false;
  std::size_t n = 16;
  std::string alphas = "0.5,1.0,1.5";
  std::string indices;
  std::size_t grid = 8;
  std::size_t audit_count = 16;

  bool has_seed = false;
  bool has_alpha = false;
  bool has_iters = false;
};

struct AuditFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::mt19937_64 seeded(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return std::mt19937_64(seq);
}

constexpr std::uint32_t kInitStream = 0x696e6974;    // "init"
constexpr std::uint32_t kSampleStream = 0x73616d70;  // "samp"
constexpr std::uint32_t kAuditStream = 0x61756474;   // "audt"

std::vector<double> parse_list(const std::string& s, const char* what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(std::string("cannot parse ") + what + " entry '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string(what) + " must not be empty");
  return out;
}

// The model and its run configuration, from a checkpoint or built fresh.
struct Loaded {
  RunConfig cfg;
  FlowModel model;
  bool from_checkpoint = false;
};

RunConfig config_with_flags(const Flags& f, const RunConfig* stored) {
  RunConfig cfg;
  if (!f.config.empty()) {
    cfg = load_run_config(f.config);
  } else if (stored != nullptr) {
    cfg = *stored;
  }
  if (f.has_seed) cfg.train.seed = f.seed;
  if (f.has_alpha) cfg.solver.alpha = f.alpha;
  if (f.has_iters) cfg.solver.max_iters = f.iters;
  if (!f.out.empty()) cfg.out_dir = f.out;
  cfg.validate();
  return cfg;
}

Loaded load_model(const Flags& f) {
  Loaded l;
  if (!f.checkpoint.empty()) {
    train::Checkpoint ck = train::load_checkpoint(f.checkpoint);
    RunConfig stored;
    if (ck.extra.contains("run_config")) stored = RunConfig::from_json(ck.extra.at("run_config"));
    l.cfg = config_with_flags(f, &stored);
    l.model = std::move(ck.model);
    l.from_checkpoint = true;
  } else {
    if (f.config.empty()) throw ConfigError("either --checkpoint or --config is required");
    l.cfg = config_with_flags(f, nullptr);
    std::mt19937_64 rng = seeded(l.cfg.train.seed, kInitStream);
    l.model = build_flow(l.cfg.architecture(), l.cfg.preprocess(), rng);
  }
  return l;
}

fs::path prepare_out(const RunConfig& cfg) {
  const fs::path dir(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

// FNV-1a over the raw bytes of every value; a compact bitwise fingerprint.
std::string fingerprint(const Tensor4& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : t.data()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

std::string image_name(const std::string& stem, std::size_t channels) {
  return stem + (channels == 3 ? ".ppm" : ".pgm");
}

std::size_t grid_columns(std::size_t n) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n)))));
}

json decode_json(const DecodeReport& r) {
  return {{"max_layer_error", r.max_layer_error},
          {"max_iterations", r.max_iterations},
          {"layers_converged", r.layers_converged},
          {"layers", r.layers}};
}

json cmd_train(const Flags& f, std::string& out_dir) {
  if (f.config.empty()) throw ConfigError("train needs --config");
  const RunConfig cfg = config_with_flags(f, nullptr);
  const fs::path out = prepare_out(cfg);
  out_dir = out.string();
  const Splits data = load_data(cfg);

  std::mt19937_64 rng = seeded(cfg.train.seed, kInitStream);
  FlowModel model = build_flow(cfg.architecture(), cfg.preprocess(), rng);
  const std::uint64_t eval_seed = cfg.train.seed ^ 0x6576616cULL;
  const bool has_eval = data.eval.size() > 0;
  FlowModel identity = model;
  for (Block& b : identity.blocks) {
    if (auto* pair = std::get_if<PairedMint>(&b)) {
      pair->lower = MintParams::zeros(pair->lower.channels, pair->lower.k_groups, pair->lower.kernel,
                                      Orientation::kLower, pair->lower.activation);
      pair->upper = MintParams::zeros(pair->upper.channels, pair->upper.k_groups, pair->upper.kernel,
                                      Orientation::kUpper, pair->upper.activation);
    }
  }
  json summary = {{"command", "train"}, {"seed", cfg.train.seed}, {"steps", cfg.train.steps}};
  if (has_eval) {
    summary["bpd_eval_identity"] = train::evaluate_bpd(identity, data.eval, eval_seed);
    summary["bpd_eval_init"] = train::evaluate_bpd(model, data.eval, eval_seed);
  }

  train::TrainConfig tc = cfg.train;
  tc.checkpoint_dir = (out / "checkpoint").string();
  tc.checkpoint_extra = {{"run_config", cfg.to_json()}};
  train::OptimState state = train::OptimState::for_params(model.parameters(), {tc.lr0});
  const train::TrainResult r = train::train_loop(model, state, data.train, has_eval ? &data.eval : nullptr, tc);
  train::write_metrics_csv((out / "metrics.csv").string(), r.history);

  const std::size_t tail = std::min<std::size_t>(50, r.history.size());
  double late = 0.0;
  for (std::size_t i = r.history.size() - tail; i < r.history.size(); ++i) late += r.history[i].bpd_train;
  summary["bpd_train_first"] = r.history.front().bpd_train;
  summary["bpd_train_last50"] = late / static_cast<double>(tail);
  if (has_eval) {
    const double final_eval = train::evaluate_bpd(model, data.eval, eval_seed);
    summary["bpd_eval_final"] = final_eval;
    summary["bpd_eval_improvement_vs_identity"] = summary["bpd_eval_identity"].get<double>() - final_eval;
  }
  summary["checkpoint"] = tc.checkpoint_dir;
  summary["parameters_fingerprint"] = [&] {
    std::vector<double> all;
    for (const ParamRef& p : model.parameters()) all.insert(all.end(), p.data.begin(), p.data.end());
    return fingerprint(Tensor4({1, 1, 1, all.size()}, all));
  }();
  return summary;
}

json cmd_eval(const Flags& f, std::string& out_dir) {
  const Loaded l = load_model(f);
  const fs::path out = prepare_out(l.cfg);
  out_dir = out.string();
  const Splits data = load_data(l.cfg);
  const std::uint64_t eval_seed = l.cfg.train.seed ^ 0x6576616cULL;
  json summary = {{"command", "eval"}, {"train_items", data.train.size()}, {"eval_items", data.eval.size()}};
  summary["bpd_train"] = train::evaluate_bpd(l.model, data.train, eval_seed);
  if (data.eval.size() > 0) summary["bpd_eval"] = train::evaluate_bpd(l.model, data.eval, eval_seed);
  return summary;
}

json cmd_sample(const Flags& f, std::string& out_dir) {
  const Loaded l = load_model(f);
  const fs::path out = prepare_out(l.cfg);
  out_dir = out.string();
  if (f.n == 0) throw ConfigError("--n must be >= 1");
  std::mt19937_64 rng = seeded(l.cfg.train.seed, kSampleStream);
  const SampleResult s = sample(l.model, f.n, l.cfg.solver, rng);
  const double roundtrip = normalized_l2(encode(l.model, s.decode.y), s.latent);
  json summary = {{"command", "sample"},
                  {"n", f.n},
                  {"alpha", l.cfg.solver.alpha},
                  {"max_iters", l.cfg.solver.max_iters},
                  {"decode", decode_json(s.decode)},
                  {"roundtrip_error", roundtrip},
                  {"clamped_fraction", s.clamped_fraction},
                  {"pixels_fingerprint", fingerprint(s.pixels)},
                  {"values_fingerprint", fingerprint(s.decode.y)}};
  const std::size_t c = l.model.input.c;
  if (c == 1 || c == 3) {
    const std::string name = image_name("samples_" + std::to_string(f.n), c);
    write_image_grid((out / name).string(), s.pixels, grid_columns(f.n));
    summary["image"] = name;
  }
  return summary;
}

// Worst per-layer residual at each iteration; layers that stopped early
// keep their final value.
struct AlphaRun {
  double alpha = 0.0;
  std::string stage;
  bool diverged = false;
  bool converged = false;
  std::size_t iterations = 0;
  double final_error = 0.0;
  double roundtrip_error = 0.0;
  double contraction = 0.0;
  std::vector<double> worst_trace;
};

AlphaRun audit_alpha(const FlowModel& model, const std::vector<std::pair<const MintParams*, Tensor4>>& targets,
                     const Tensor4& y, const Tensor4& z, SolverConfig cfg, double alpha) {
  AlphaRun run;
  run.alpha = alpha;
  cfg.alpha = alpha;
  cfg.record_trace = true;
  run.converged = true;
  std::vector<double> contractions;
  try {
    for (const auto& [layer, target] : targets) {
      const InversionResult r = invert_mint(*layer, target, cfg);
      run.converged = run.converged && r.converged;
      run.iterations = std::max(run.iterations, r.iterations_used);
      run.final_error = std::max(run.final_error, r.final_error);
      contractions.push_back(contraction_ratio(r.trace));
      if (run.worst_trace.size() < r.trace.size()) {
        run.worst_trace.resize(r.trace.size(), run.worst_trace.empty() ? 0.0 : run.worst_trace.back());
      }
      for (std::size_t i = 0; i < run.worst_trace.size(); ++i) {
        const double e = i < r.trace.size() ? r.trace[i] : r.trace.back();
        run.worst_trace[i] = std::max(run.worst_trace[i], e);
      }
    }
    cfg.record_trace = false;
    run.roundtrip_error = normalized_l2(decode(model, z, cfg).y, y);
  } catch (const DivergenceError&) {
    run.diverged = true;
    run.converged = false;
  }
  if (!std::isfinite(run.roundtrip_error)) run.converged = false;
  std::sort(contractions.begin(), contractions.end());
  if (!contractions.empty()) run.contraction = contractions.back();
  return run;
}

json cmd_invert_audit(const Flags& f, std::string& out_dir) {
  const Loaded l = load_model(f);
  const fs::path out = prepare_out(l.cfg);
  out_dir = out.string();
  const Splits data = load_data(l.cfg);
  const data::Dataset& src = data.eval.size() > 0 ? data.eval : data.train;
  const std::size_t count = std::min(f.audit_count, src.size());
  std::mt19937_64 noise = seeded(l.cfg.train.seed, kAuditStream);
  const Tensor4 y = preprocess(src.images.slice_batch(0, count), l.model.preprocess, noise).y;

  // Exact per-layer targets from a forward pass.
  std::vector<std::pair<const MintParams*, Tensor4>> targets;
  Tensor4 h = y;
  for (const Block& b : l.model.blocks) {
    if (const auto* sq = std::get_if<Squeeze>(&b)) {
      h = squeeze(h, sq->factor);
      continue;
    }
    const auto& pair = std::get<PairedMint>(b);
    for (const MintParams* p : {&pair.lower, &pair.upper}) {
      h = forward(*p, h);
      targets.emplace_back(p, h);
    }
  }
  const Tensor4 z = h;

  std::vector<AlphaRun> runs;
  auto sweep = [&](const std::vector<double>& alphas, const char* stage) {
    for (double a : alphas) {
      if (!(a > 0.0)) throw ConfigError("alphas must be positive");
      const bool seen = std::any_of(runs.begin(), runs.end(), [&](const AlphaRun& r) { return std::abs(r.alpha - a) < 1e-12; });
      if (seen) continue;
      AlphaRun r = audit_alpha(l.model, targets, y, z, l.cfg.solver, a);
      r.stage = stage;
      runs.push_back(std::move(r));
    }
  };
  auto best_of = [&]() -> const AlphaRun* {
    const AlphaRun* best = nullptr;
    for (const AlphaRun& r : runs) {
      if (!r.converged) continue;
      if (best == nullptr || r.iterations < best->iterations ||
          (r.iterations == best->iterations && r.final_error < best->final_error)) {
        best = &r;
      }
    }
    return best;
  };

  sweep(parse_list(f.alphas, "--alphas"), "coarse");
  if (f.refine) {
    const AlphaRun* coarse = best_of();
    if (coarse != nullptr) {
      std::vector<double> fine;
      for (int k = -10; k <= 10; ++k) {
        const double a = std::round((coarse->alpha + 0.05 * k) * 100.0) / 100.0;
        if (a > 0.0 && a < 2.0) fine.push_back(a);
      }
      sweep(fine, "fine");
    }
  }

  {
    std::ofstream csv(out / "audit_alpha.csv");
    if (!csv) throw IoError("cannot write " + (out / "audit_alpha.csv").string());
    csv.precision(17);
    csv << "alpha,iteration,normalized_error\n";
    for (const AlphaRun& r : runs)
      for (std::size_t i = 0; i < r.worst_trace.size(); ++i) csv << r.alpha << "," << i << "," << r.worst_trace[i] << "\n";
  }

  const AlphaRun* best = best_of();
  const double threshold = 1e-6;
  json rows = json::array();
  for (const AlphaRun& r : runs) {
    rows.push_back({{"alpha", r.alpha},
                    {"stage", r.stage},
                    {"converged", r.converged},
                    {"diverged", r.diverged},
                    {"max_iterations", r.iterations},
                    {"max_layer_error", r.final_error},
                    {"roundtrip_error", r.roundtrip_error},
                    {"worst_contraction", r.contraction},
                    {"outside_guarantee", !(r.alpha > 0.0 && r.alpha < 2.0)}});
  }
  json summary = {{"command", "invert-audit"},
                  {"items", count},
                  {"layers", targets.size()},
                  {"tol", l.cfg.solver.tol},
                  {"max_iters", l.cfg.solver.max_iters},
                  {"roundtrip_threshold", threshold},
                  {"alphas", rows}};
  summary["best_alpha"] = best ? json(best->alpha) : json(nullptr);
  const bool pass = best != nullptr && best->roundtrip_error < threshold;
  summary["pass"] = pass;
  if (!pass) {
    summary["failure"] = best ? "best alpha roundtrip error above threshold" : "no alpha converged on every layer";
  }
  return summary;
}

double lu_log_abs_det(std::vector<double> a, std::size_t n) {
  double ld = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t r = k + 1; r < n; ++r)
      if (std::abs(a[r * n + k]) > std::abs(a[piv * n + k])) piv = r;
    if (a[piv * n + k] == 0.0) return -INFINITY;
    if (piv != k)
      for (std::size_t c = 0; c < n; ++c) std::swap(a[k * n + c], a[piv * n + c]);
    const double p = a[k * n + k];
    ld += std::log(std::abs(p));
    for (std::size_t r = k + 1; r < n; ++r) {
      const double m = a[r * n + k] / p;
      if (m != 0.0)
        for (std::size_t c = k; c < n; ++c) a[r * n + c] -= m * a[k * n + c];
    }
  }
  return ld;
}

json cmd_jacobian_audit(const Flags& f, std::string& out_dir) {
  const Loaded l = load_model(f);
  const fs::path out = prepare_out(l.cfg);
  out_dir = out.string();
  std::mt19937_64 rng = seeded(l.cfg.train.seed, kAuditStream);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor4 h(l.model.input.batch(1));
  for (double& v : h.data()) v = normal(rng);

  constexpr double kEps = 1e-6;
  constexpr std::size_t kDenseLimit = 1024;
  const double diag_threshold = 1e-5, tri_threshold = 1e-6, det_threshold = 1e-4;
  double worst_diag = 0.0, worst_tri = 0.0, worst_det = 0.0;

  std::ofstream csv(out / "audit_jacobian.csv");
  if (!csv) throw IoError("cannot write " + (out / "audit_jacobian.csv").string());
  csv.precision(17);
  csv << "layer,orientation,dimension,max_diag_abs_error,max_off_triangle,log_det,log_det_dense\n";

  std::size_t layer = 0;
  for (const Block& b : l.model.blocks) {
    if (const auto* sq = std::get_if<Squeeze>(&b)) {
      h = squeeze(h, sq->factor);
      continue;
    }
    const auto& pair = std::get<PairedMint>(b);
    for (const MintParams* p : {&pair.lower, &pair.upper}) {
      const std::size_t d = h.size();
      const bool dense = d <= kDenseLimit;
      const Tensor4 analytic = jac_diag(*p, h);
      std::vector<double> jac(dense ? d * d : 0);
      double diag_err = 0.0, off = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        Tensor4 xp = h, xm = h;
        xp[j] += kEps;
        xm[j] -= kEps;
        const Tensor4 fp = forward(*p, xp), fm = forward(*p, xm);
        for (std::size_t i = 0; i < d; ++i) {
          const double v = (fp[i] - fm[i]) / (2.0 * kEps);
          if (i == j) diag_err = std::max(diag_err, std::abs(v - analytic[i]));
          const bool above = p->orientation == Orientation::kLower ? j > i : j < i;
          if (above) off = std::max(off, std::abs(v));
          if (dense) jac[i * d + j] = v;
        }
      }
      const double ld = log_det(*p, h)[0];
      const double ld_dense = dense ? lu_log_abs_det(jac, d) : NAN;
      worst_diag = std::max(worst_diag, diag_err);
      worst_tri = std::max(worst_tri, off);
      if (dense) worst_det = std::max(worst_det, std::abs(std::expm1(ld - ld_dense)));
      csv << layer << "," << to_string(p->orientation) << "," << d << "," << diag_err << "," << off << "," << ld
          << "," << ld_dense << "\n";
      h = forward(*p, h);
      ++layer;
    }
  }
  const bool pass = worst_diag < diag_threshold && worst_tri < tri_threshold && worst_det < det_threshold;
  json summary = {{"command", "jacobian-audit"},
                  {"layers", layer},
                  {"max_diag_abs_error", worst_diag},
                  {"max_off_triangle", worst_tri},
                  {"max_det_relative_error", worst_det},
                  {"thresholds", {{"diag", diag_threshold}, {"triangle", tri_threshold}, {"det", det_threshold}}},
                  {"pass", pass}};
  if (!pass) summary["failure"] = "Jacobian audit above threshold";
  return summary;
}

json cmd_interpolate(const Flags& f, std::string& out_dir) {
  const Loaded l = load_model(f);
  const fs::path out = prepare_out(l.cfg);
  out_dir = out.string();
  const Splits data = load_data(l.cfg);
  const std::vector<double> raw_idx = parse_list(f.indices, "--indices");
  if (raw_idx.size() != 4) throw ConfigError("--indices needs exactly 4 image indices");
  std::vector<std::size_t> idx;
  for (double v : raw_idx) {
    if (v < 0 || v != std::floor(v) || v >= static_cast<double>(data.train.size())) {
      throw ConfigError("image index " + std::to_string(v) + " outside the training set of " +
                        std::to_string(data.train.size()));
    }
    idx.push_back(static_cast<std::size_t>(v));
  }
  std::mt19937_64 noise = seeded(l.cfg.train.seed, kAuditStream);
  const Tensor4 y = preprocess(data.train.take(idx), l.model.preprocess, noise).y;
  std::vector<Tensor4> ends;
  for (std::size_t k = 0; k < 4; ++k) ends.push_back(y.slice_batch(k, 1));
  const InterpolationResult r = interpolate(l.model, ends[0], ends[1], ends[2], ends[3], f.grid, l.cfg.solver);

  const std::size_t g = f.grid;
  const std::size_t corners[4] = {0, g - 1, (g - 1) * g, g * g - 1};
  const double threshold = 1e-3;
  json errs = json::array();
  double worst = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    const double e = normalized_l2(r.y.slice_batch(corners[k], 1), ends[k]);
    errs.push_back(e);
    worst = std::max(worst, std::isfinite(e) ? e : INFINITY);
  }
  json summary = {{"command", "interpolate"},
                  {"indices", idx},
                  {"grid", g},
                  {"corner_errors", errs},
                  {"threshold", threshold},
                  {"decode", decode_json(r.decode)},
                  {"pass", worst < threshold}};
  const std::size_t c = l.model.input.c;
  if (c == 1 || c == 3) {
    const std::string name = image_name("samples_interp", c);
    write_image_grid((out / name).string(), r.pixels, g);
    summary["image"] = name;
  }
  if (!(worst < threshold)) summary["failure"] = "corner reconstruction above threshold";
  return summary;
}

// Output directory for the error summary, if one can be determined.
std::string best_effort_out(const Flags& f) {
  if (!f.out.empty()) return f.out;
  if (!f.config.empty()) {
    try {
      return load_run_config(f.config).out_dir;
    } catch (const std::exception&) {
    }
  }
  return {};
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"mintnet: masked invertible flows"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* sub, bool model_source) {
    sub->add_option("--config", f.config, "run configuration JSON");
    sub->add_option("--out", f.out, "output directory (overrides output.dir)");
    sub->add_option("--seed", f.seed, "seed (overrides train.seed)");
    sub->add_option("--alpha", f.alpha, "solver step size");
    sub->add_option("--iters", f.iters, "solver iteration budget per layer");
    if (model_source) sub->add_option("--checkpoint", f.checkpoint, "checkpoint directory");
  };
  CLI::App* train_cmd = app.add_subcommand("train", "train a flow and write metrics and a checkpoint");
  common(train_cmd, false);
  CLI::App* eval_cmd = app.add_subcommand("eval", "bits per dimension of a checkpoint");
  common(eval_cmd, true);
  CLI::App* sample_cmd = app.add_subcommand("sample", "draw samples through the fixed-point inverse");
  common(sample_cmd, true);
  sample_cmd->add_option("--n", f.n, "number of samples");
  CLI::App* audit_cmd = app.add_subcommand("invert-audit", "inversion error against the step size");
  common(audit_cmd, true);
  audit_cmd->add_option("--alphas", f.alphas, "comma separated step sizes");
  audit_cmd->add_flag("--refine", f.refine, "follow the coarse grid with a 0.05 grid around the best step");
  audit_cmd->add_option("--items", f.audit_count, "number of held-out images inverted");
  CLI::App* jac_cmd = app.add_subcommand("jacobian-audit", "analytic Jacobian diagonal against finite differences");
  common(jac_cmd, true);
  CLI::App* interp_cmd = app.add_subcommand("interpolate", "latent interpolation grid between four images");
  common(interp_cmd, true);
  interp_cmd->add_option("--indices", f.indices, "four comma separated training image indices")->required();
  interp_cmd->add_option("--grid", f.grid, "grid size per axis")->check(CLI::Range(2, 64));

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  for (CLI::App* sub : app.get_subcommands()) {
    f.has_seed = sub->count("--seed") > 0;
    f.has_alpha = sub->count("--alpha") > 0;
    f.has_iters = sub->count("--iters") > 0;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string name = chosen->get_name();
  json summary;
  int code = kExitOk;
  std::string out_dir;
  try {
    if (chosen == train_cmd) {
      summary = cmd_train(f, out_dir);
    } else if (chosen == eval_cmd) {
      summary = cmd_eval(f, out_dir);
    } else if (chosen == sample_cmd) {
      summary = cmd_sample(f, out_dir);
    } else if (chosen == audit_cmd) {
      summary = cmd_invert_audit(f, out_dir);
    } else if (chosen == jac_cmd) {
      summary = cmd_jacobian_audit(f, out_dir);
    } else {
      summary = cmd_interpolate(f, out_dir);
    }
    if (summary.contains("pass") && !summary.at("pass").get<bool>()) code = kExitAudit;
  } catch (const ConfigError& e) {
    code = kExitConfig;
    summary = {{"command", name}, {"error", e.what()}};
  } catch (const train::CheckpointError& e) {
    code = kExitIo;
    summary = {{"command", name}, {"error", e.what()}};
  } catch (const data::IdxError& e) {
    code = kExitIo;
    summary = {{"command", name}, {"error", e.what()}};
  } catch (const IoError& e) {
    code = kExitIo;
    summary = {{"command", name}, {"error", e.what()}};
  } catch (const DivergenceError& e) {
    code = kExitDivergence;
    summary = {{"command", name}, {"error", e.what()}, {"iteration", e.iteration()}};
  } catch (const ShapeError& e) {
    code = kExitConfig;
    summary = {{"command", name}, {"error", e.what()}};
  }
  static const char* kStatus[] = {"ok", "", "config_error", "io_error", "diverged", "audit_failed"};
  summary["status"] = kStatus[code];
  summary["exit_code"] = code;
  if (summary.contains("error")) std::cerr << "mintnet " << name << ": " << summary["error"].get<std::string>() << "\n";
  if (code == kExitAudit) std::cerr << "mintnet " << name << ": " << summary.value("failure", "audit failed") << "\n";

  const std::string dir = out_dir.empty() ? best_effort_out(f) : out_dir;
  if (!dir.empty()) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    try {
      if (!ec) write_json(fs::path(dir) / "summary.json", summary);
    } catch (const IoError& e) {
      std::cerr << "mintnet " << name << ": " << e.what() << "\n";
      if (code == kExitOk) code = kExitIo;
    }
  }
  std::cout << summary.dump(2) << "\n";
  return code;
}

}  // namespace mintnet::cli
