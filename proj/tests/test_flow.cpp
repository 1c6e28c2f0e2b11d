#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "mintnet/errors.hpp"
#include "mintnet/flow.hpp"
#include "support/oracles.hpp"
#include "support/random_layers.hpp"

using namespace mintnet;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

FlowModel random_model(std::mt19937_64& rng, double weight_std = 0.3) {
  FlowModel m;
  m.input = {1, 4, 4};
  m.blocks.emplace_back(PairedMint{oracle::random_layer(1, 2, 3, Orientation::kLower, rng, weight_std),
                                   oracle::random_layer(1, 2, 3, Orientation::kUpper, rng, weight_std)});
  m.blocks.emplace_back(Squeeze{2});
  m.blocks.emplace_back(PairedMint{oracle::random_layer(4, 2, 3, Orientation::kLower, rng, weight_std),
                                   oracle::random_layer(4, 2, 3, Orientation::kUpper, rng, weight_std)});
  return m;
}

double gaussian_log_density(const Tensor4& z) {
  double s = 0.0;
  for (double v : z.data()) s += -0.5 * v * v - 0.5 * kLog2Pi;
  return s;
}

}  // namespace

TEST_CASE("build_flow preset structure") {
  std::mt19937_64 rng(1);
  FlowArchitecture arch;
  arch.input = {1, 8, 8};
  const FlowModel m = build_flow(arch, {}, rng);
  CHECK(m.blocks.size() == 7);
  CHECK(std::holds_alternative<Squeeze>(m.blocks[3]));
  CHECK(m.mint_layer_count() == 12);
  CHECK(m.latent_shape() == ItemShape{4, 4, 4});
  CHECK(std::get<PairedMint>(m.blocks[4]).lower.channels == 4);
  CHECK(std::get<PairedMint>(m.blocks[4]).lower.hidden() == 12);

  arch.input = {1, 7, 7};
  CHECK_THROWS_AS(build_flow(arch, {}, rng), ConfigError);
}

TEST_CASE("log_prob of an empty model is the standard normal density") {
  std::mt19937_64 rng(2);
  FlowModel m;
  m.input = {2, 2, 2};
  const Tensor4 y = oracle::random_tensor({3, 2, 2, 2}, rng);
  const std::vector<double> lp = log_prob(m, y);
  for (std::size_t n = 0; n < 3; ++n) CHECK(lp[n] == doctest::Approx(gaussian_log_density(y.slice_batch(n, 1))));
  m.blocks.emplace_back(Squeeze{2});
  const std::vector<double> lps = log_prob(m, y);
  CHECK(lps[0] == doctest::Approx(lp[0]).epsilon(1e-14));
}

TEST_CASE("single scaling layer closed form") {
  FlowModel m;
  m.input = {1, 2, 2};
  PairedMint pair{MintParams::zeros(1, 1, 3, Orientation::kLower), MintParams::zeros(1, 1, 3, Orientation::kUpper)};
  pair.lower.log_t[0] = std::log(2.0);
  m.blocks.emplace_back(pair);
  const double lp = log_prob(m, Tensor4({1, 1, 2, 2}))[0];
  CHECK(lp == doctest::Approx(-2.0 * kLog2Pi + 4.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("flow log_prob equals the dense change of variables") {
  std::mt19937_64 rng(3);
  const FlowModel m = random_model(rng);
  const Tensor4 y = oracle::random_tensor({1, 1, 4, 4}, rng);
  const oracle::Matrix j = oracle::fd_jacobian([&](const Tensor4& x) { return encode(m, x); }, y);
  const auto [ld, sign] = oracle::log_abs_det(j);
  CHECK(sign == 1.0);
  const double expect = gaussian_log_density(encode(m, y)) + ld;
  CHECK(std::abs(log_prob(m, y)[0] - expect) < 1e-5);
}

TEST_CASE("preprocess") {
  PreprocessConfig cfg;
  SUBCASE("symmetry point maps to zero") {
    const Preprocessed p = preprocess_with_noise(Tensor4({1, 1, 1, 1}, 127.0), Tensor4({1, 1, 1, 1}, 1.0), cfg);
    CHECK(std::abs(p.y[0]) < 1e-15);
  }
  SUBCASE("small lambda approaches the plain logit") {
    cfg.lambda = 1e-12;
    const Preprocessed p = preprocess_with_noise(Tensor4({1, 1, 1, 1}, 40.0), Tensor4({1, 1, 1, 1}, 0.25), cfg);
    const double s = 40.25 / 256.0;
    CHECK(p.y[0] == doctest::Approx(std::log(s / (1.0 - s))).epsilon(1e-9));
  }
  SUBCASE("postprocess inverts the logit chain") {
    std::mt19937_64 rng(4);
    Tensor4 raw({2, 1, 3, 3});
    std::uniform_int_distribution<int> pix(0, 255);
    for (double& v : raw.data()) v = pix(rng);
    std::mt19937_64 noise_rng(5);
    Tensor4 noise(raw.shape());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& v : noise.data()) v = u(noise_rng);
    const Preprocessed p = preprocess_with_noise(raw, noise, cfg);
    const Tensor4 back = postprocess(p.y, cfg);
    for (std::size_t i = 0; i < raw.size(); ++i) CHECK(std::abs(back[i] / 256.0 - (raw[i] + noise[i]) / 256.0) < 1e-12);
  }
  SUBCASE("logdet is the derivative of the map") {
    const double raw = 200.0, u = 0.3, h = 1e-6;
    const auto y_of = [&](double v) {
      return preprocess_with_noise(Tensor4({1, 1, 1, 1}, raw), Tensor4({1, 1, 1, 1}, v), cfg).y[0];
    };
    const double dy_dx = (y_of(u + h) - y_of(u - h)) / (2.0 * h) * 256.0;  // x = (raw + u) / 256
    const double ld = preprocess_with_noise(Tensor4({1, 1, 1, 1}, raw), Tensor4({1, 1, 1, 1}, u), cfg).logdet[0];
    CHECK(ld == doctest::Approx(std::log(dy_dx) - std::log(256.0)).epsilon(1e-7));
  }
  SUBCASE("out-of-range pixels are rejected") {
    CHECK_THROWS_AS(preprocess_with_noise(Tensor4({1, 1, 1, 1}, 256.0), Tensor4({1, 1, 1, 1}), cfg), std::out_of_range);
    cfg.lambda = 0.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_CASE("bpd of the identity flow matches a per-pixel formula") {
  FlowModel m;
  m.input = {1, 2, 2};
  m.preprocess.lambda = 1e-6;
  const Tensor4 raw({1, 1, 2, 2}, std::vector<double>{0, 60, 128, 255});
  std::mt19937_64 rng(6), replay(6);
  const double got = bpd(m, raw, rng);

  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double lam = 1e-6;
  double nats = 0.0;
  for (double v : raw.data()) {
    const double s = lam + (1 - 2 * lam) * (v + u(replay)) / 256.0;
    const double y = std::log(s / (1 - s));
    // -log N(y) - log|dy/dx| with x = (v + u) / 256
    nats += 0.5 * y * y + 0.5 * kLog2Pi - std::log((1 - 2 * lam) / (s * (1 - s))) + std::log(256.0);
  }
  CHECK(got == doctest::Approx(nats / (4.0 * std::log(2.0))).epsilon(1e-12));
}

TEST_CASE("bpd is monotone in the log-likelihood") {
  const std::vector<double> pre = {1.0, 2.0};
  CHECK(bpd_from({-10.0, -12.0}, pre, 4) > bpd_from({-9.0, -12.0}, pre, 4));
}

TEST_CASE("decode inverts encode") {
  std::mt19937_64 rng(7);
  const FlowModel m = random_model(rng, 0.15);
  const Tensor4 y = oracle::random_tensor({2, 1, 4, 4}, rng);
  SolverConfig cfg;
  cfg.tol = 1e-20;
  const DecodeReport r = decode(m, encode(m, y), cfg);
  CHECK(r.layers == 4);
  CHECK(r.layers_converged == 4);
  CHECK(normalized_l2(r.y, y) < 1e-12);
}

TEST_CASE("sampling") {
  FlowModel id;
  id.input = {1, 3, 3};
  id.blocks.emplace_back(PairedMint{MintParams::zeros(1, 1, 3, Orientation::kLower),
                                    MintParams::zeros(1, 1, 3, Orientation::kUpper)});
  std::mt19937_64 a(8), b(8);
  const SampleResult s = sample(id, 16, {}, a);
  const SampleResult t = sample(id, 16, {}, b);
  CHECK(s.pixels == t.pixels);
  CHECK(s.pixels.shape() == Shape4{16, 1, 3, 3});
  Tensor4 expect = postprocess(s.latent, id.preprocess);
  for (double& v : expect.data()) v = std::clamp(v, 0.0, 255.0);
  CHECK(max_abs_diff(s.pixels, expect) == 0.0);

  std::mt19937_64 rng(9);
  const FlowModel m = random_model(rng, 0.15);
  const SampleResult r = sample(m, 4, {}, rng);
  CHECK(normalized_l2(encode(m, r.decode.y), r.latent) < 1e-4);
  for (double lp : log_prob(m, r.decode.y)) CHECK(std::isfinite(lp));
}

TEST_CASE("interpolation grid corners") {
  CHECK(interpolation_angles(8)[7] == doctest::Approx(std::numbers::pi / 2));
  CHECK(interpolation_angles(8)[1] == doctest::Approx(std::numbers::pi / 14));
  std::mt19937_64 rng(10);
  const FlowModel m = random_model(rng, 0.15);
  std::vector<Tensor4> ys;
  for (int i = 0; i < 4; ++i) ys.push_back(oracle::random_tensor({1, 1, 4, 4}, rng));
  SolverConfig cfg;
  cfg.tol = 1e-20;
  const InterpolationResult r = interpolate(m, ys[0], ys[1], ys[2], ys[3], 4, cfg);
  CHECK(r.y.shape() == Shape4{16, 1, 4, 4});
  CHECK(normalized_l2(r.y.slice_batch(0, 1), ys[0]) < 1e-10);
  CHECK(normalized_l2(r.y.slice_batch(3, 1), ys[1]) < 1e-10);
  CHECK(normalized_l2(r.y.slice_batch(12, 1), ys[2]) < 1e-10);
  CHECK(normalized_l2(r.y.slice_batch(15, 1), ys[3]) < 1e-10);
  CHECK_THROWS_AS(interpolate(m, ys[0], ys[1], ys[2], Tensor4({1, 1, 2, 2}), 4, cfg), ShapeError);
}

TEST_CASE("image grids are written as binary PGM") {
  const std::string path = (std::filesystem::temp_directory_path() / "mintnet_grid.pgm").string();
  Tensor4 px({3, 1, 2, 2}, 7.0);
  px[0] = 300.0;
  write_image_grid(path, px, 2);
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  in.get();
  CHECK(magic == "P5");
  CHECK(w == 4);
  CHECK(h == 4);
  CHECK(maxv == 255);
  std::vector<unsigned char> buf(16);
  in.read(reinterpret_cast<char*>(buf.data()), 16);
  CHECK(buf[0] == 255);
  CHECK(buf[1] == 7);
  CHECK(buf[15] == 0);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(write_image_grid(path, Tensor4({1, 2, 2, 2}), 1), ShapeError);
}
