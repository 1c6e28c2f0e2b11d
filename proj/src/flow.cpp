#include "mintnet/flow.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "mintnet/errors.hpp"

namespace mintnet {

void PreprocessConfig::validate() const {
  if (!(lambda > 0.0 && lambda < 0.5)) throw ConfigError("preprocess lambda must lie in (0, 0.5)");
  if (levels < 2) throw ConfigError("preprocess levels must be >= 2");
}

void FlowArchitecture::validate() const {
  if (input.dim() == 0) throw ConfigError("model input shape must be non-empty");
  if (k_groups == 0) throw ConfigError("model k_groups must be >= 1");
  if (kernel % 2 == 0) throw ConfigError("model kernel must be odd");
  if (pairs_per_stage == 0) throw ConfigError("model pairs_per_stage must be >= 1");
  if (!(init_scale >= 0.0)) throw ConfigError("model init_scale must be >= 0");
  std::size_t h = input.h, w = input.w;
  for (std::size_t s = 0; s < squeezes; ++s) {
    if (h % 2 != 0 || w % 2 != 0) {
      throw ConfigError("input " + std::to_string(input.h) + "x" + std::to_string(input.w) +
                        " cannot be squeezed " + std::to_string(squeezes) + " times by 2");
    }
    h /= 2;
    w /= 2;
  }
}

ItemShape FlowModel::latent_shape() const {
  ItemShape s = input;
  for (const Block& b : blocks) {
    if (const auto* sq = std::get_if<Squeeze>(&b)) {
      const std::size_t k = sq->factor;
      if (k == 0 || s.h % k != 0 || s.w % k != 0) {
        throw ShapeError("squeeze by " + std::to_string(k) + " does not divide " + std::to_string(s.h) +
                         "x" + std::to_string(s.w));
      }
      s = {s.c * k * k, s.h / k, s.w / k};
    } else {
      const auto& pair = std::get<PairedMint>(b);
      if (pair.lower.channels != s.c || pair.upper.channels != s.c) {
        throw ShapeError("paired layer expects " + std::to_string(pair.lower.channels) +
                         " channels but receives " + std::to_string(s.c));
      }
    }
  }
  return s;
}

std::size_t FlowModel::mint_layer_count() const {
  std::size_t n = 0;
  for (const Block& b : blocks) n += std::holds_alternative<PairedMint>(b) ? 2 : 0;
  return n;
}

std::vector<ParamRef> FlowModel::parameters() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (auto* pair = std::get_if<PairedMint>(&blocks[i])) {
      const std::string prefix = "block" + std::to_string(i) + ".";
      for (ParamRef& r : mintnet::parameters(pair->lower, prefix + "lower.")) out.push_back(std::move(r));
      for (ParamRef& r : mintnet::parameters(pair->upper, prefix + "upper.")) out.push_back(std::move(r));
    }
  }
  return out;
}

std::vector<ParamView> FlowModel::parameter_views() const {
  std::vector<ParamView> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (const auto* pair = std::get_if<PairedMint>(&blocks[i])) {
      const std::string prefix = "block" + std::to_string(i) + ".";
      for (ParamView& r : mintnet::parameter_views(pair->lower, prefix + "lower.")) out.push_back(std::move(r));
      for (ParamView& r : mintnet::parameter_views(pair->upper, prefix + "upper.")) out.push_back(std::move(r));
    }
  }
  return out;
}

FlowModel build_flow(const FlowArchitecture& arch, const PreprocessConfig& pre, std::mt19937_64& rng) {
  arch.validate();
  pre.validate();
  FlowModel model;
  model.input = arch.input;
  model.preprocess = pre;
  const InitScheme scheme{arch.init_scale, arch.activation};
  std::size_t c = arch.input.c;
  for (std::size_t stage = 0; stage <= arch.squeezes; ++stage) {
    if (stage > 0) {
      model.blocks.emplace_back(Squeeze{2});
      c *= 4;
    }
    for (std::size_t i = 0; i < arch.pairs_per_stage; ++i) {
      PairedMint pair{init(c, arch.k_groups, arch.kernel, Orientation::kLower, rng, scheme),
                      init(c, arch.k_groups, arch.kernel, Orientation::kUpper, rng, scheme)};
      model.blocks.emplace_back(std::move(pair));
    }
  }
  return model;
}

Preprocessed preprocess_with_noise(const Tensor4& raw, const Tensor4& noise, const PreprocessConfig& cfg) {
  cfg.validate();
  if (raw.shape() != noise.shape()) {
    throw ShapeError("dequantization noise " + noise.shape().str() + " does not match pixels " +
                     raw.shape().str());
  }
  const double lam = cfg.lambda;
  const double levels = cfg.levels;
  const double base = std::log1p(-2.0 * lam) - std::log(levels);
  Preprocessed out{Tensor4(raw.shape()), std::vector<double>(raw.shape().n, 0.0)};
  const std::size_t per = raw.shape().per_item();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double v = raw[i];
    if (!(v >= 0.0 && v <= levels - 1.0)) {
      throw std::out_of_range("pixel value " + std::to_string(v) + " outside [0, " +
                              std::to_string(cfg.levels - 1) + "]");
    }
    const double s = lam + (1.0 - 2.0 * lam) * (v + noise[i]) / levels;
    out.y[i] = std::log(s) - std::log1p(-s);
    out.logdet[i / per] += base - std::log(s) - std::log1p(-s);
  }
  return out;
}

Preprocessed preprocess(const Tensor4& raw, const PreprocessConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Tensor4 noise(raw.shape());
  for (double& u : noise.data()) u = uniform(rng);
  return preprocess_with_noise(raw, noise, cfg);
}

Tensor4 postprocess(const Tensor4& y, const PreprocessConfig& cfg) {
  const double lam = cfg.lambda;
  const double levels = cfg.levels;
  return map(y, [lam, levels](double v) {
    const double s = 1.0 / (1.0 + std::exp(-v));
    return (s - lam) / (1.0 - 2.0 * lam) * levels;
  });
}

std::vector<double> standard_normal_log_prob(const Tensor4& z) {
  const std::size_t per = z.shape().per_item();
  const double norm = -0.5 * static_cast<double>(per) * std::log(2.0 * std::numbers::pi);
  std::vector<double> out(z.shape().n, norm);
  for (std::size_t i = 0; i < z.size(); ++i) out[i / per] -= 0.5 * z[i] * z[i];
  return out;
}

FlowNodes record_params(ad::Tape& tape, const FlowModel& model, bool trainable) {
  FlowNodes nodes;
  for (const Block& b : model.blocks) {
    if (const auto* pair = std::get_if<PairedMint>(&b)) {
      nodes.layers.push_back(record_params(tape, pair->lower, trainable));
      nodes.layers.push_back(record_params(tape, pair->upper, trainable));
    }
  }
  return nodes;
}

FlowGraph record_log_prob(ad::Tape& tape, const FlowModel& model, const FlowNodes& nodes, ad::Node x) {
  const Shape4& xs = tape.value(x).shape();
  if (xs.c != model.input.c || xs.h != model.input.h || xs.w != model.input.w) {
    throw ShapeError("flow expects items of (" + std::to_string(model.input.c) + "," +
                     std::to_string(model.input.h) + "," + std::to_string(model.input.w) +
                     "), input is " + xs.str());
  }
  ad::Node h = x;
  ad::Node log_det = tape.constant(Tensor4::zeros({xs.n, 1, 1, 1}));
  std::size_t layer = 0;
  for (const Block& b : model.blocks) {
    if (const auto* sq = std::get_if<Squeeze>(&b)) {
      h = tape.squeeze(h, sq->factor);
      continue;
    }
    const auto& pair = std::get<PairedMint>(b);
    for (const MintParams* p : {&pair.lower, &pair.upper}) {
      const MintGraph g = record_mint(tape, *p, nodes.layers.at(layer++), h, true);
      h = g.output;
      log_det = tape.add(log_det, g.log_det);
    }
  }
  const double per = static_cast<double>(tape.value(h).shape().per_item());
  const ad::Node norm = tape.constant(Tensor4::scalar(-0.5 * per * std::log(2.0 * std::numbers::pi)));
  const ad::Node base = tape.add(tape.scale(tape.sum_per_item(tape.square(h)), -0.5), norm);
  return {h, log_det, tape.add(base, log_det)};
}

std::vector<double> log_prob(const FlowModel& model, const Tensor4& y) {
  ad::Tape tape;
  const FlowNodes nodes = record_params(tape, model, false);
  return tape.value(record_log_prob(tape, model, nodes, tape.constant(y)).log_prob).vec();
}

Tensor4 encode(const FlowModel& model, const Tensor4& y) {
  Tensor4 h = y;
  for (const Block& b : model.blocks) {
    if (const auto* sq = std::get_if<Squeeze>(&b)) {
      h = squeeze(h, sq->factor);
    } else {
      const auto& pair = std::get<PairedMint>(b);
      h = forward(pair.upper, forward(pair.lower, h));
    }
  }
  return h;
}

DecodeReport decode(const FlowModel& model, const Tensor4& z, const SolverConfig& cfg) {
  DecodeReport rep;
  Tensor4 h = z;
  std::size_t layer = model.mint_layer_count();
  auto invert = [&](const MintParams& p) {
    --layer;
    InversionResult r;
    try {
      r = invert_mint(p, h, cfg);
    } catch (const DivergenceError& e) {
      throw DivergenceError("Mint layer " + std::to_string(layer) + ": " + e.what(), e.iteration());
    }
    rep.max_layer_error = std::max(rep.max_layer_error, r.final_error);
    rep.max_iterations = std::max(rep.max_iterations, r.iterations_used);
    rep.layers_converged += r.converged ? 1 : 0;
    ++rep.layers;
    h = std::move(r.x);
  };
  for (auto it = model.blocks.rbegin(); it != model.blocks.rend(); ++it) {
    if (const auto* sq = std::get_if<Squeeze>(&*it)) {
      h = unsqueeze(h, sq->factor);
    } else {
      const auto& pair = std::get<PairedMint>(*it);
      invert(pair.upper);
      invert(pair.lower);
    }
  }
  rep.y = std::move(h);
  return rep;
}

double bpd_from(const std::vector<double>& log_prob, const std::vector<double>& logdet_pre,
                std::size_t dimension) {
  if (log_prob.empty()) throw std::invalid_argument("bpd of an empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < log_prob.size(); ++i) total += log_prob[i] + logdet_pre.at(i);
  const double mean = total / static_cast<double>(log_prob.size());
  return -mean / (static_cast<double>(dimension) * std::numbers::ln2);
}

double bpd(const FlowModel& model, const Tensor4& raw, std::mt19937_64& rng) {
  if (raw.shape().n == 0) throw std::invalid_argument("bpd of an empty batch");
  const Preprocessed pre = preprocess(raw, model.preprocess, rng);
  return bpd_from(log_prob(model, pre.y), pre.logdet, model.dimension());
}

namespace {

Tensor4 to_pixels(const Tensor4& y, const PreprocessConfig& cfg, std::size_t* clamped) {
  Tensor4 px = postprocess(y, cfg);
  const double top = cfg.levels - 1;
  std::size_t count = 0;
  for (double& v : px.data()) {
    if (v < 0.0 || v > top) ++count;
    v = std::clamp(v, 0.0, top);
  }
  if (clamped) *clamped = count;
  return px;
}

}  // namespace

SampleResult sample(const FlowModel& model, std::size_t n, const SolverConfig& cfg, std::mt19937_64& rng) {
  const ItemShape ls = model.latent_shape();
  SampleResult res;
  res.latent = Tensor4(ls.batch(n));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : res.latent.data()) v = normal(rng);
  res.decode = decode(model, res.latent, cfg);
  std::size_t clamped = 0;
  res.pixels = to_pixels(res.decode.y, model.preprocess, &clamped);
  res.clamped_fraction = res.pixels.size() ? static_cast<double>(clamped) / res.pixels.size() : 0.0;
  return res;
}

std::vector<double> interpolation_angles(std::size_t grid_n) {
  std::vector<double> angles(grid_n, 0.0);
  // grid_n = 8 gives {0, pi/14, ..., 7pi/14}.
  for (std::size_t i = 0; i < grid_n; ++i) {
    angles[i] = static_cast<double>(i) * std::numbers::pi / (2.0 * static_cast<double>(grid_n - 1));
  }
  return angles;
}

InterpolationResult interpolate(const FlowModel& model, const Tensor4& y1, const Tensor4& y2,
                                const Tensor4& y3, const Tensor4& y4, std::size_t grid_n,
                                const SolverConfig& cfg) {
  if (grid_n < 2) throw std::invalid_argument("interpolation grid needs at least 2 steps");
  for (const Tensor4* y : {&y1, &y2, &y3, &y4}) {
    if (y->shape() != model.input.batch(1)) {
      throw ShapeError("interpolation endpoints must be single items of the model input shape, got " +
                       y->shape().str());
    }
  }
  const Tensor4 z1 = encode(model, y1), z2 = encode(model, y2), z3 = encode(model, y3),
                z4 = encode(model, y4);
  const std::vector<double> angles = interpolation_angles(grid_n);
  const ItemShape ls = model.latent_shape();
  Tensor4 grid(ls.batch(grid_n * grid_n));
  const std::size_t per = ls.dim();
  for (std::size_t r = 0; r < grid_n; ++r) {
    const double phi = angles[r];
    for (std::size_t c = 0; c < grid_n; ++c) {
      const double psi = angles[c];
      const double a1 = std::cos(phi) * std::cos(psi), a2 = std::cos(phi) * std::sin(psi);
      const double a3 = std::sin(phi) * std::cos(psi), a4 = std::sin(phi) * std::sin(psi);
      double* dst = &grid[(r * grid_n + c) * per];
      for (std::size_t i = 0; i < per; ++i) dst[i] = a1 * z1[i] + a2 * z2[i] + a3 * z3[i] + a4 * z4[i];
    }
  }
  InterpolationResult res;
  res.grid_n = grid_n;
  res.decode = decode(model, grid, cfg);
  res.y = res.decode.y;
  res.pixels = to_pixels(res.y, model.preprocess, nullptr);
  return res;
}

void write_image_grid(const std::string& path, const Tensor4& pixels, std::size_t columns) {
  const Shape4& s = pixels.shape();
  if (s.c != 1 && s.c != 3) {
    throw ShapeError("image grids need 1 or 3 channels, got " + s.str());
  }
  if (columns == 0 || s.n == 0) throw ShapeError("image grid needs at least one tile and column");
  const std::size_t rows = (s.n + columns - 1) / columns;
  const std::size_t width = columns * s.w, height = rows * s.h;
  std::vector<unsigned char> buf(width * height * s.c, 0);
  for (std::size_t n = 0; n < s.n; ++n) {
    const std::size_t ty = n / columns, tx = n % columns;
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x)
        for (std::size_t c = 0; c < s.c; ++c) {
          const double v = std::clamp(std::round(pixels(n, c, y, x)), 0.0, 255.0);
          buf[((ty * s.h + y) * width + tx * s.w + x) * s.c + c] = static_cast<unsigned char>(v);
        }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image " + path);
  out << (s.c == 1 ? "P5" : "P6") << "\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing image " + path);
}

}  // namespace mintnet
