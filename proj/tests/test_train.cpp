#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "mintnet/checkpoint.hpp"
#include "mintnet/errors.hpp"
#include "mintnet/train.hpp"
#include "support/oracles.hpp"
#include "support/random_layers.hpp"

using namespace mintnet;
using namespace mintnet::train;
namespace fs = std::filesystem;

namespace {

FlowModel small_model(std::uint64_t seed, std::size_t pairs = 1, std::size_t squeezes = 0) {
  std::mt19937_64 rng(seed);
  FlowArchitecture arch;
  arch.input = {1, 8, 8};
  arch.k_groups = 2;
  arch.pairs_per_stage = pairs;
  arch.squeezes = squeezes;
  return build_flow(arch, {}, rng);
}

fs::path scratch(const std::string& name) { return fs::temp_directory_path() / ("mintnet_train_" + name); }

std::vector<double> flat_params(FlowModel& m) {
  std::vector<double> out;
  for (const ParamRef& p : m.parameters()) out.insert(out.end(), p.data.begin(), p.data.end());
  return out;
}

}  // namespace

TEST_CASE("amsgrad") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    FlowModel m = small_model(1);
    const std::vector<double> before = flat_params(m);
    auto params = m.parameters();
    OptimState s = OptimState::for_params(params);
    std::vector<Tensor4> g;
    for (const ParamRef& p : params) g.emplace_back(p.shape);
    amsgrad_step(params, g, s, 0.1);
    CHECK(flat_params(m) == before);
    CHECK(s.step == 1);
  }
  SUBCASE("unit gradient step") {
    std::vector<double> theta = {0.0, 1.0};
    std::vector<ParamRef> params = {{"p", {1, 1, 1, 2}, theta}};
    OptimState s = OptimState::for_params(params);
    amsgrad_step(params, {Tensor4({1, 1, 1, 2}, 1.0)}, s, 0.1);
    const double delta = -0.1 * (1 - 0.9) / (std::sqrt(1 - 0.999) + 1e-8);
    CHECK(theta[0] == doctest::Approx(delta).epsilon(1e-14));
    CHECK(theta[1] == doctest::Approx(1.0 + delta).epsilon(1e-14));
  }
  SUBCASE("non-finite gradients are rejected before any update") {
    std::vector<double> theta = {0.5};
    std::vector<ParamRef> params = {{"p", {1, 1, 1, 1}, theta}};
    OptimState s = OptimState::for_params(params);
    CHECK_THROWS_AS(amsgrad_step(params, {Tensor4::scalar(NAN)}, s, 0.1), std::domain_error);
    CHECK(theta[0] == 0.5);
    CHECK(s.step == 0);
  }
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 100, 0.01) == 0.01);
  CHECK(std::abs(cosine_lr(100, 100, 0.01)) < 1e-18);
  CHECK(cosine_lr(50, 100, 0.01) == doctest::Approx(0.005).epsilon(1e-14));
  CHECK_THROWS_AS(cosine_lr(101, 100, 0.01), std::out_of_range);
}

TEST_CASE("training gradient matches finite differences of the loss") {
  std::mt19937_64 rng(2);
  FlowModel m;
  m.input = {2, 4, 4};
  m.blocks.emplace_back(PairedMint{oracle::random_layer(2, 2, 3, Orientation::kLower, rng, 0.3),
                                   oracle::random_layer(2, 2, 3, Orientation::kUpper, rng, 0.3)});
  const Tensor4 y = oracle::random_tensor({2, 2, 4, 4}, rng);
  const std::vector<double> pre = {0.3, -0.2};
  const LossAndGrad lg = loss_and_grad(m, y, pre);
  auto params = m.parameters();
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < params[k].data.size(); ++i) {
      const double keep = params[k].data[i], eps = 1e-5;
      params[k].data[i] = keep + eps;
      const double up = loss_and_grad(m, y, pre).loss;
      params[k].data[i] = keep - eps;
      const double down = loss_and_grad(m, y, pre).loss;
      params[k].data[i] = keep;
      const double fd = (up - down) / (2 * eps);
      const double a = lg.grads[k][i];
      worst = std::max(worst, std::abs(a - fd) / (std::abs(a) + std::abs(fd) + 1e-8));
    }
  CHECK(worst < 1e-3);
}

TEST_CASE("training loop behaviour") {
  std::mt19937_64 rng(3);
  const data::Dataset bars = data::synth_bars(500, 8, rng);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.seed = 11;

  SUBCASE("zero learning rate keeps the parameters fixed") {
    FlowModel m = small_model(4);
    const std::vector<double> before = flat_params(m);
    OptimState s = OptimState::for_params(m.parameters());
    cfg.steps = 5;
    cfg.lr0 = 0.0;
    const TrainResult r = train_loop(m, s, bars, nullptr, cfg);
    CHECK(flat_params(m) == before);
    CHECK(r.history.size() == 5);
  }
  SUBCASE("bpd drops on bars") {
    FlowModel m = small_model(5);
    OptimState s = OptimState::for_params(m.parameters());
    cfg.steps = 300;
    cfg.lr0 = 5e-3;
    const TrainResult r = train_loop(m, s, bars, nullptr, cfg);
    const double before = evaluate_bpd(small_model(5), bars, 1);
    const double after = evaluate_bpd(m, bars, 1);
    CHECK(after < before);
    double late = 0.0;
    for (std::size_t i = 280; i < 300; ++i) late += r.history[i].bpd_train / 20.0;
    CHECK(late < r.history[0].bpd_train);
  }
  SUBCASE("resuming from a checkpoint reproduces the uninterrupted run") {
    cfg.steps = 12;
    cfg.lr0 = 2e-3;
    FlowModel full = small_model(6);
    OptimState fs_state = OptimState::for_params(full.parameters());
    const TrainResult whole = train_loop(full, fs_state, bars, nullptr, cfg);

    const fs::path dir = scratch("resume");
    FlowModel part = small_model(6);
    OptimState ps = OptimState::for_params(part.parameters());
    TrainConfig interrupted = cfg;
    interrupted.checkpoint_every = 5;
    interrupted.checkpoint_dir = dir.string();
    struct Stop {};
    CHECK_THROWS_AS(train_loop(part, ps, bars, nullptr, interrupted,
                               [](const MetricRow& row) {
                                 if (row.step == 6) throw Stop{};
                               }),
                    Stop);

    Checkpoint ck = load_checkpoint(dir.string());
    CHECK(ck.optim.step == 5);
    TrainResult rest = train_loop(ck.model, ck.optim, bars, nullptr, cfg);
    REQUIRE(rest.history.size() == 7);
    for (std::size_t i = 0; i < 7; ++i) CHECK(rest.history[i].loss == whole.history[5 + i].loss);
    CHECK(flat_params(ck.model) == flat_params(full));
    fs::remove_all(dir);
  }
}

TEST_CASE("held-out evaluation and metrics file") {
  std::mt19937_64 rng(7);
  const data::Dataset train_set = data::synth_bars(64, 8, rng);
  const data::Dataset eval_set = data::synth_bars(32, 8, rng);
  FlowModel m = small_model(8);
  OptimState s = OptimState::for_params(m.parameters());
  TrainConfig cfg;
  cfg.steps = 4;
  cfg.batch_size = 8;
  cfg.eval_every = 2;
  const TrainResult r = train_loop(m, s, train_set, &eval_set, cfg);
  CHECK_FALSE(r.history[0].bpd_eval.has_value());
  CHECK(r.history[1].bpd_eval.has_value());
  CHECK(r.history[3].bpd_eval.has_value());
  const fs::path csv = scratch("metrics.csv");
  write_metrics_csv(csv.string(), r.history);
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,lr,loss,bpd_train,bpd_eval");
  fs::remove(csv);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.steps = 10;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("checkpoints") {
  FlowModel m = small_model(9, 1, 1);
  OptimState s = OptimState::for_params(m.parameters());
  for (auto& slot : s.m)
    for (std::size_t i = 0; i < slot.size(); ++i) slot[i] = 1e-3 * static_cast<double>(i) + 1.0 / 3.0;
  s.step = 17;
  const fs::path dir = scratch("ckpt");
  save_checkpoint(dir.string(), m, s, {{"note", "x"}});

  SUBCASE("roundtrip is bit-exact") {
    Checkpoint ck = load_checkpoint(dir.string());
    CHECK(flat_params(ck.model) == flat_params(m));
    CHECK(ck.optim.m == s.m);
    CHECK(ck.optim.v_hat == s.v_hat);
    CHECK(ck.optim.step == 17);
    CHECK(ck.extra.at("note") == "x");
    std::mt19937_64 rng(10);
    const Tensor4 y = oracle::random_tensor({2, 1, 8, 8}, rng);
    CHECK(encode(ck.model, y) == encode(m, y));
    CHECK(log_prob(ck.model, y) == log_prob(m, y));
  }
  SUBCASE("tampered shape names the tensor") {
    std::ifstream in(dir / "manifest.json");
    nlohmann::json j = nlohmann::json::parse(in);
    in.close();
    j["tensors"][1]["shape"] = {1, 2, 3, 3};
    std::ofstream(dir / "manifest.json") << j.dump();
    try {
      load_checkpoint(dir.string());
      FAIL("expected a shape error");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::kShape);
      CHECK(std::string(e.what()).find(j["tensors"][1]["name"].get<std::string>()) != std::string::npos);
    }
  }
  SUBCASE("unknown format version") {
    std::ifstream in(dir / "manifest.json");
    nlohmann::json j = nlohmann::json::parse(in);
    in.close();
    j["format"] = "mintnet-checkpoint/999";
    std::ofstream(dir / "manifest.json") << j.dump();
    try {
      load_checkpoint(dir.string());
      FAIL("expected a version error");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::kVersion);
    }
  }
  SUBCASE("missing tensor file") {
    fs::remove(dir / "block0.lower.w2.bin");
    try {
      load_checkpoint(dir.string());
      FAIL("expected a missing tensor");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::kMissingTensor);
    }
  }
  fs::remove_all(dir);
}
