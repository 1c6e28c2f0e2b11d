#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "mintnet/cli.hpp"
#include "mintnet/errors.hpp"

using nlohmann::json;
using mintnet::cli::run;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mintnet_cli_" + name);
  fs::remove_all(p);
  return p;
}

fs::path write_config(const std::string& name, const json& j) {
  const fs::path p = fs::temp_directory_path() / ("mintnet_cli_" + name + ".json");
  std::ofstream(p) << j.dump(2);
  return p;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json tiny_config(const fs::path& out) {
  return {{"model", {{"input", {1, 4, 4}}, {"k_groups", 2}, {"pairs_per_stage", 1}, {"squeezes", 1}}},
          {"data", {{"source", "bars"}, {"train_count", 64}, {"eval_count", 16}}},
          {"train", {{"steps", 6}, {"batch_size", 8}, {"lr", 0.01}, {"seed", 5}}},
          {"solver", {{"tol", 1e-14}}},
          {"output", {{"dir", out.string()}}}};
}

}  // namespace

TEST_CASE("config parsing rejects unknown keys and bad values") {
  json j = tiny_config("x");
  j["train"]["learning_rate"] = 0.1;
  CHECK_THROWS_WITH_AS(mintnet::cli::RunConfig::from_json(j), doctest::Contains("train.learning_rate"),
                       mintnet::ConfigError);
  json k = tiny_config("x");
  k["extra"] = 1;
  CHECK_THROWS_AS(mintnet::cli::RunConfig::from_json(k), mintnet::ConfigError);
  json t = tiny_config("x");
  t["model"]["kernel"] = "three";
  CHECK_THROWS_AS(mintnet::cli::RunConfig::from_json(t), mintnet::ConfigError);

  const mintnet::cli::RunConfig c = mintnet::cli::RunConfig::from_json(tiny_config("x"));
  CHECK(mintnet::cli::RunConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("exit codes per failure class") {
  const fs::path out = scratch("codes");
  json bad = tiny_config(out);
  bad["solver"]["bogus"] = true;
  CHECK(run({"train", "--config", write_config("bad", bad).string()}) == mintnet::cli::kExitConfig);
  CHECK(run({"train", "--config", (out / "missing.json").string()}) == mintnet::cli::kExitIo);
  CHECK(run({"eval", "--checkpoint", (out / "nowhere").string(), "--out", out.string()}) == mintnet::cli::kExitIo);
  CHECK(read_json(out / "summary.json").at("status") == "io_error");
  CHECK(run({"frobnicate"}) == mintnet::cli::kExitConfig);

  json wild = tiny_config(out);
  wild["model"]["init_scale"] = 3.0;
  const fs::path cfg = write_config("wild", wild);
  CHECK(run({"sample", "--config", cfg.string(), "--alpha", "50", "--iters", "120"}) ==
        mintnet::cli::kExitDivergence);
  CHECK(read_json(out / "summary.json").at("status") == "diverged");
  CHECK(run({"invert-audit", "--config", cfg.string(), "--iters", "1", "--alphas", "0.1"}) ==
        mintnet::cli::kExitAudit);
  fs::remove_all(out);
}

TEST_CASE("jacobian-audit on a fresh one-pair 2x4x4 model") {
  const fs::path out = scratch("jac");
  json j = {{"model", {{"input", {2, 4, 4}}, {"k_groups", 2}, {"pairs_per_stage", 1}, {"squeezes", 0}}},
            {"output", {{"dir", out.string()}}}};
  CHECK(run({"jacobian-audit", "--config", write_config("jac", j).string()}) == 0);
  const json s = read_json(out / "summary.json");
  CHECK(s.at("max_diag_abs_error").get<double>() < 1e-5);
  CHECK(s.at("layers") == 2);
  CHECK(fs::exists(out / "audit_jacobian.csv"));
  fs::remove_all(out);
}

TEST_CASE("train, eval, sample, invert-audit and interpolate") {
  const fs::path out = scratch("flow");
  const fs::path cfg = write_config("flow", tiny_config(out));
  REQUIRE(run({"train", "--config", cfg.string()}) == 0);
  CHECK(fs::exists(out / "metrics.csv"));
  CHECK(fs::exists(out / "checkpoint" / "manifest.json"));
  const std::string ck = (out / "checkpoint").string();

  CHECK(run({"eval", "--checkpoint", ck}) == 0);
  CHECK(read_json(out / "summary.json").contains("bpd_eval"));

  CHECK(run({"sample", "--checkpoint", ck, "--n", "9"}) == 0);
  CHECK(fs::exists(out / "samples_9.pgm"));
  CHECK(read_json(out / "summary.json").at("roundtrip_error").get<double>() < 1e-4);

  CHECK(run({"invert-audit", "--checkpoint", ck, "--alphas", "0.5,1.0,1.5"}) == 0);
  const json audit = read_json(out / "summary.json");
  CHECK(audit.at("best_alpha") == 1.0);
  std::ifstream csv(out / "audit_alpha.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "alpha,iteration,normalized_error");
  std::map<double, std::vector<double>> traces;
  while (std::getline(csv, line)) {
    std::stringstream ss(line);
    std::string a, i, e;
    std::getline(ss, a, ',');
    std::getline(ss, i, ',');
    std::getline(ss, e, ',');
    traces[std::stod(a)].push_back(std::stod(e));
  }
  CHECK(traces.size() == 3);
  for (const auto& [alpha, tr] : traces) {
    INFO("alpha " << alpha);
    REQUIRE(tr.size() >= 3);
    const std::size_t n = tr.size();
    CHECK(tr[n - 1] < tr[n - 2]);
    CHECK(tr[n - 2] < tr[n - 3]);
  }

  CHECK(run({"invert-audit", "--checkpoint", ck, "--alphas", "0.5,1.0,1.5", "--refine"}) == 0);
  CHECK(read_json(out / "summary.json").at("alphas").size() > 3);

  CHECK(run({"interpolate", "--checkpoint", ck, "--indices", "0,1,2,3", "--grid", "4"}) == 0);
  const json interp = read_json(out / "summary.json");
  for (const json& e : interp.at("corner_errors")) CHECK(e.get<double>() < 1e-3);
  CHECK(run({"interpolate", "--checkpoint", ck, "--indices", "0,1,2"}) == mintnet::cli::kExitConfig);
  fs::remove_all(out);
}

TEST_CASE("identity-initialized samples are deterministic") {
  const fs::path a = scratch("id_a"), b = scratch("id_b");
  json j = tiny_config(a);
  j["model"]["init_scale"] = 0.0;
  const fs::path cfg = write_config("id", j);
  CHECK(run({"sample", "--config", cfg.string(), "--n", "16", "--out", a.string()}) == 0);
  CHECK(run({"sample", "--config", cfg.string(), "--n", "16", "--out", b.string()}) == 0);
  CHECK(slurp(a / "samples_16.pgm") == slurp(b / "samples_16.pgm"));
  CHECK(slurp(a / "summary.json") == slurp(b / "summary.json"));
  CHECK(read_json(a / "summary.json").at("decode").at("max_iterations") == 0);
  fs::remove_all(a);
  fs::remove_all(b);
}
