#include "mintnet/solver.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "mintnet/errors.hpp"

namespace mintnet {

void SolverConfig::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("solver alpha must be > 0");
  if (max_iters < 1) throw ConfigError("solver max_iters must be >= 1");
  if (!(tol > 0.0)) throw ConfigError("solver tol must be > 0");
}

InversionResult invert_fixed_point(const TensorMap& f, const TensorMap& diag, const Tensor4& z,
                                   const Tensor4& x0, const SolverConfig& cfg) {
  cfg.validate();
  if (x0.shape() != z.shape()) {
    throw ShapeError("initial iterate " + x0.shape().str() + " does not match target " +
                     z.shape().str());
  }
  InversionResult res;
  res.alpha_outside_guarantee = !cfg.alpha_guaranteed();
  res.x = x0;
  Tensor4 fx = f(res.x);
  double err = normalized_l2(fx, z);
  for (std::size_t it = 1;; ++it) {
    if (cfg.record_trace) res.trace.push_back(err);
    if (err <= cfg.tol) {
      res.converged = true;
      break;
    }
    if (it > cfg.max_iters) break;
    const Tensor4 d = diag(res.x);
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!(d[i] > 0.0)) {
        throw DivergenceError("non-positive Jacobian diagonal at iteration " + std::to_string(it), it);
      }
      res.x[i] -= cfg.alpha * (fx[i] - z[i]) / d[i];
    }
    if (!res.x.all_finite()) {
      throw DivergenceError("fixed-point iterate became non-finite at iteration " + std::to_string(it),
                            it);
    }
    res.iterations_used = it;
    fx = f(res.x);
    err = normalized_l2(fx, z);
    if (!std::isfinite(err)) {
      throw DivergenceError("residual became non-finite at iteration " + std::to_string(it), it);
    }
  }
  res.final_error = err;
  return res;
}

InversionResult invert_mint(const MintParams& p, const Tensor4& z, const SolverConfig& cfg) {
  const Tensor4 x0 = div(z, p.t());
  return invert_fixed_point([&p](const Tensor4& x) { return forward(p, x); },
                            [&p](const Tensor4& x) { return jac_diag(p, x); }, z, x0, cfg);
}

SequentialResult invert_sequential_oracle(const TensorMap& f, const Tensor4& z, Orientation o) {
  constexpr std::size_t kMaxDoublings = 60;
  constexpr double kTol = 1e-12;
  SequentialResult res;
  res.x = Tensor4(z.shape());
  const std::size_t per = z.shape().per_item();
  const std::size_t items = z.shape().n;
  auto eval = [&](std::size_t idx) {
    ++res.evaluations;
    return f(res.x)[idx];
  };
  for (std::size_t k = 0; k < per; ++k) {
    const std::size_t coord = o == Orientation::kLower ? k : per - 1 - k;
    for (std::size_t n = 0; n < items; ++n) {
      const std::size_t idx = n * per + coord;
      const double target = z[idx];
      double lo = -1.0, hi = 1.0;
      std::size_t doublings = 0;
      res.x[idx] = lo;
      while (eval(idx) > target) {
        if (++doublings > kMaxDoublings) {
          throw DivergenceError("sequential oracle: no lower bracket for coordinate " +
                                    std::to_string(idx),
                                doublings);
        }
        hi = lo;
        lo *= 2.0;
        res.x[idx] = lo;
      }
      res.x[idx] = hi;
      while (eval(idx) < target) {
        if (++doublings > kMaxDoublings) {
          throw DivergenceError("sequential oracle: no upper bracket for coordinate " +
                                    std::to_string(idx),
                                doublings);
        }
        lo = hi;
        hi *= 2.0;
        res.x[idx] = hi;
      }
      while (hi - lo > kTol) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        res.x[idx] = mid;
        if (eval(idx) < target) {
          lo = mid;
        } else {
          hi = mid;
        }
      }
      res.x[idx] = 0.5 * (lo + hi);
      ++res.coordinate_solves;
    }
  }
  return res;
}

double contraction_ratio(std::span<const double> trace, double rel_floor) {
  std::vector<double> ratios;
  const double floor = trace.empty() ? 0.0 : rel_floor * trace.front();
  for (std::size_t i = 1; i < trace.size(); ++i) {
    if (trace[i - 1] <= floor || trace[i] <= floor || trace[i] == 0.0) break;
    ratios.push_back(std::sqrt(trace[i] / trace[i - 1]));
  }
  if (ratios.empty()) return 0.0;
  const std::size_t take = std::min<std::size_t>(10, ratios.size());
  std::vector<double> tail(ratios.end() - static_cast<std::ptrdiff_t>(take), ratios.end());
  std::sort(tail.begin(), tail.end());
  return take % 2 == 1 ? tail[take / 2] : 0.5 * (tail[take / 2 - 1] + tail[take / 2]);
}

std::vector<ProbeRow> convergence_probe(const MintParams& layer, Shape4 shape,
                                        std::span<const double> alphas, const ProbeOptions& opts) {
  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> normal(0.0, opts.input_scale);
  Tensor4 target(shape);
  for (double& v : target.data()) v = normal(rng);
  const Tensor4 z = forward(layer, target);

  std::vector<ProbeRow> rows;
  for (double alpha : alphas) {
    ProbeRow row;
    row.alpha = alpha;
    SolverConfig cfg{alpha, opts.max_iters, opts.tol, true};
    try {
      const InversionResult r = invert_mint(layer, z, cfg);
      row.trace = r.trace;
      row.final_error = r.final_error;
      if (r.converged) row.iterations_to_tol = r.iterations_used;
      row.diverged = !r.converged && !(r.final_error < r.trace.front());
    } catch (const DivergenceError&) {
      row.diverged = true;
      row.final_error = std::numeric_limits<double>::infinity();
    }
    row.contraction = contraction_ratio(row.trace);
    rows.push_back(std::move(row));
  }

  if (!opts.csv_path.empty()) {
    std::ofstream out(opts.csv_path);
    if (!out) throw IoError("cannot write probe CSV " + opts.csv_path);
    out.precision(17);
    out << "alpha,iter,error\n";
    for (const ProbeRow& row : rows)
      for (std::size_t i = 0; i < row.trace.size(); ++i) out << row.alpha << "," << i << "," << row.trace[i] << "\n";
  }
  return rows;
}

}  // namespace mintnet
