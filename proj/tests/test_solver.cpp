#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "mintnet/errors.hpp"
#include "mintnet/solver.hpp"
#include "support/oracles.hpp"
#include "support/random_layers.hpp"

using namespace mintnet;

namespace {

MintParams linear_layer(std::mt19937_64& rng) {
  MintParams p = oracle::random_layer(2, 2, 3, Orientation::kLower, rng);
  for (double& v : p.w3.data()) v = 0.0;
  return p;
}

TensorMap fwd(const MintParams& p) {
  return [&p](const Tensor4& x) { return forward(p, x); };
}
TensorMap jd(const MintParams& p) {
  return [&p](const Tensor4& x) { return jac_diag(p, x); };
}

}  // namespace

TEST_CASE("one Newton step inverts a linear layer") {
  std::mt19937_64 rng(1);
  const MintParams p = linear_layer(rng);
  const Tensor4 z = oracle::random_tensor({1, 2, 4, 4}, rng);
  SolverConfig cfg;
  cfg.max_iters = 1;
  cfg.tol = 1e-300;
  const InversionResult r = invert_fixed_point(fwd(p), jd(p), z, oracle::random_tensor(z.shape(), rng), cfg);
  const Tensor4 expect = div(sub(z, p.b3), p.t());
  CHECK(max_abs_diff(r.x, expect) < 1e-14);
}

TEST_CASE("a fixed point is left unchanged") {
  std::mt19937_64 rng(2);
  const MintParams p = oracle::random_layer(2, 2, 3, Orientation::kUpper, rng, 0.2);
  const Tensor4 x = oracle::random_tensor({1, 2, 4, 4}, rng);
  const Tensor4 z = forward(p, x);
  for (double alpha : {0.5, 1.0, 1.7}) {
    SolverConfig cfg;
    cfg.alpha = alpha;
    cfg.max_iters = 5;
    cfg.tol = 1e-300;
    const InversionResult r = invert_fixed_point(fwd(p), jd(p), z, x, cfg);
    CHECK(max_abs_diff(r.x, x) == 0.0);
  }
}

TEST_CASE("random layer inverts within 120 iterations") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const MintParams p = init(2, 3, 3, trial % 2 ? Orientation::kUpper : Orientation::kLower, rng, {0.3, {}});
    const Tensor4 x = oracle::random_tensor({1, 2, 8, 8}, rng);
    SolverConfig cfg;
    cfg.tol = 1e-10;
    const InversionResult r = invert_mint(p, forward(p, x), cfg);
    CHECK(r.converged);
    CHECK(r.iterations_used <= 120);
    CHECK(normalized_l2(r.x, x) < 1e-8);
  }
}

TEST_CASE("solver config validation and outside-guarantee flag") {
  SolverConfig cfg;
  cfg.alpha = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.alpha = 2.5;
  CHECK_NOTHROW(cfg.validate());
  CHECK_FALSE(cfg.alpha_guaranteed());
  std::mt19937_64 rng(4);
  const MintParams p = linear_layer(rng);
  cfg.max_iters = 3;
  const InversionResult r = invert_mint(p, oracle::random_tensor({1, 2, 2, 2}, rng), cfg);
  CHECK(r.alpha_outside_guarantee);
}

TEST_CASE("non-positive diagonal raises DivergenceError") {
  const TensorMap f = [](const Tensor4& x) { return x; };
  const TensorMap d = [](const Tensor4& x) { return Tensor4(x.shape(), 0.0); };
  const Tensor4 z = Tensor4::ones({1, 1, 2, 2});
  CHECK_THROWS_AS(invert_fixed_point(f, d, z, Tensor4(z.shape()), SolverConfig{}), DivergenceError);
}

TEST_CASE("sequential oracle") {
  std::mt19937_64 rng(5);
  SUBCASE("linear layer") {
    const MintParams p = linear_layer(rng);
    const Tensor4 z = oracle::random_tensor({1, 2, 3, 3}, rng);
    const SequentialResult s = invert_sequential_oracle(fwd(p), z, p.orientation);
    CHECK(max_abs_diff(s.x, div(sub(z, p.b3), p.t())) < 1e-10);
    CHECK(s.coordinate_solves == z.size());
  }
  SUBCASE("agrees with the fixed-point inverse") {
    for (Orientation o : {Orientation::kLower, Orientation::kUpper}) {
      const MintParams p = init(1, 3, 3, o, rng, {0.3, {}});
      const Tensor4 z = oracle::random_tensor({1, 1, 4, 4}, rng);
      const SequentialResult s = invert_sequential_oracle(fwd(p), z, o);
      SolverConfig cfg;
      cfg.tol = 1e-20;
      const InversionResult r = invert_mint(p, z, cfg);
      CHECK(max_abs_diff(s.x, r.x) < 1e-6);
      CHECK(s.coordinate_solves == 16);
    }
  }
}

TEST_CASE("convergence probe on linear and near-identity layers") {
  std::mt19937_64 rng(6);
  const MintParams lin = linear_layer(rng);
  const std::vector<double> alphas = {0.5, 1.0, 1.5};
  ProbeOptions opts;
  opts.max_iters = 60;
  const auto rows = convergence_probe(lin, {1, 2, 4, 4}, alphas, opts);
  REQUIRE(rows.size() == 3);
  CHECK(rows[1].iterations_to_tol == 1u);
  CHECK(std::abs(rows[0].contraction - 0.5) < 1e-10);
  CHECK(std::abs(rows[2].contraction - 0.5) < 1e-10);

  const MintParams p = init(2, 2, 3, Orientation::kLower, rng, {0.2, {}});
  const std::string csv = (std::filesystem::temp_directory_path() / "mintnet_probe.csv").string();
  opts.csv_path = csv;
  opts.max_iters = 120;
  opts.tol = 1e-26;
  for (const ProbeRow& row : convergence_probe(p, {1, 2, 4, 4}, alphas, opts)) {
    INFO("alpha " << row.alpha);
    CHECK_FALSE(row.diverged);
    CHECK(row.final_error < 1e-20);
    if (row.alpha != 1.0) CHECK(std::abs(row.contraction - std::abs(1.0 - row.alpha)) < 0.1);
  }
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "alpha,iter,error");
  std::filesystem::remove(csv);
}

TEST_CASE("contraction ratio of a geometric trace") {
  std::vector<double> trace;
  double e = 1.0;
  for (int i = 0; i < 30; ++i, e *= 0.09) trace.push_back(e);
  CHECK(contraction_ratio(trace) == doctest::Approx(0.3).epsilon(1e-12));
}
