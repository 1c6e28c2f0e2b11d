#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mintnet/masks.hpp"
#include "mintnet/mint.hpp"
#include "mintnet/tensor.hpp"

namespace mintnet {

struct SolverConfig {
  double alpha = 1.0;
  std::size_t max_iters = 120;
  // Threshold on ||f(x) - z||^2 / D.
  double tol = 1e-8;
  bool record_trace = false;

  void validate() const;
  // Local convergence is only guaranteed for alpha in (0, 2).
  bool alpha_guaranteed() const { return alpha > 0.0 && alpha < 2.0; }
};

struct InversionResult {
  Tensor4 x;
  std::size_t iterations_used = 0;
  // ||f(x) - z||^2 / D at the returned x.
  double final_error = 0.0;
  bool converged = false;
  bool alpha_outside_guarantee = false;
  // Residual error before each update, then at the returned x.
  std::vector<double> trace;
};

using TensorMap = std::function<Tensor4(const Tensor4&)>;

// Diagonally preconditioned fixed-point iteration
//   x <- x - alpha * (f(x) - z) / diag(J_f(x))
// run until the normalized residual drops to cfg.tol or cfg.max_iters updates.
// Throws DivergenceError on a non-finite iterate or non-positive diagonal.
InversionResult invert_fixed_point(const TensorMap& f, const TensorMap& diag, const Tensor4& z,
                                   const Tensor4& x0, const SolverConfig& cfg);

// Convenience overload for one Mint layer, starting from z / t.
InversionResult invert_mint(const MintParams& p, const Tensor4& z, const SolverConfig& cfg);

struct SequentialResult {
  Tensor4 x;
  std::size_t coordinate_solves = 0;
  std::size_t evaluations = 0;
};

// Solves one coordinate at a time in triangular order (raster order for lower,
// reversed for upper) by bracketed bisection on that coordinate alone. Needs
// each output coordinate to be increasing in its own input coordinate.
SequentialResult invert_sequential_oracle(const TensorMap& f, const Tensor4& z, Orientation o);

struct ProbeRow {
  double alpha = 0.0;
  std::optional<std::size_t> iterations_to_tol;
  double final_error = 0.0;
  // Median of the last ten residual-norm ratios sqrt(e[t] / e[t-1]) taken
  // while the error stays above 1e-10 of its starting value, where round-off
  // in f(x) - z is still negligible.
  double contraction = 0.0;
  bool diverged = false;
  std::vector<double> trace;
};

struct ProbeOptions {
  std::size_t max_iters = 120;
  double tol = 1e-20;
  std::uint64_t seed = 0;
  // Scale of the random target input x*, with z = f(x*).
  double input_scale = 1.0;
  // When set, rows (alpha, iter, error) are written here as CSV.
  std::string csv_path;
};

std::vector<ProbeRow> convergence_probe(const MintParams& layer, Shape4 shape,
                                        std::span<const double> alphas, const ProbeOptions& opts);

// Residual-norm ratio estimate used by convergence_probe.
double contraction_ratio(std::span<const double> trace, double rel_floor = 1e-10);

}  // namespace mintnet
