#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "mintnet/autodiff.hpp"
#include "mintnet/mint.hpp"
#include "mintnet/solver.hpp"
#include "mintnet/tensor.hpp"

namespace mintnet {

// A lower-orientation layer followed by an upper-orientation one.
struct PairedMint {
  MintParams lower;
  MintParams upper;
};

// Space-to-depth by `factor`; a coordinate permutation with zero log-det.
struct Squeeze {
  std::size_t factor = 2;
};

using Block = std::variant<PairedMint, Squeeze>;

// Uniform dequantization followed by the logit map into (lambda, 1 - lambda).
struct PreprocessConfig {
  double lambda = 0.05;
  int levels = 256;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ItemShape {
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;
  std::size_t dim() const { return c * h * w; }
  Shape4 batch(std::size_t n) const { return {n, c, h, w}; }
  bool operator==(const ItemShape&) const = default;
};

struct FlowModel {
  ItemShape input;
  std::vector<Block> blocks;
  PreprocessConfig preprocess;

  // Shape after every block; throws ShapeError on an invalid squeeze.
  ItemShape latent_shape() const;
  std::size_t dimension() const { return input.dim(); }
  std::size_t mint_layer_count() const;
  // Trainable tensors in block order, named "block<i>.<lower|upper>.<tensor>".
  std::vector<ParamRef> parameters();
  std::vector<ParamView> parameter_views() const;
};

// Preset structure: `stages` groups of `pairs_per_stage` paired layers with a
// 2x2 squeeze between consecutive stages.
struct FlowArchitecture {
  ItemShape input;
  std::size_t k_groups = 3;
  std::size_t kernel = 3;
  std::size_t pairs_per_stage = 3;
  std::size_t squeezes = 1;
  Activation activation;
  double init_scale = 0.05;

  void validate() const;
};

FlowModel build_flow(const FlowArchitecture& arch, const PreprocessConfig& pre, std::mt19937_64& rng);

struct Preprocessed {
  Tensor4 y;
  // log-Jacobian of pixel/levels -> y, per batch entry.
  std::vector<double> logdet;
};

// Maps integer pixels raw in [0, levels-1] with dequantization noise u in [0, 1)
// to y = logit(lambda + (1 - 2 lambda) (raw + u) / levels).
Preprocessed preprocess_with_noise(const Tensor4& raw, const Tensor4& noise, const PreprocessConfig& cfg);
Preprocessed preprocess(const Tensor4& raw, const PreprocessConfig& cfg, std::mt19937_64& rng);
// Inverse of the logit map: returns the continuous pixel value raw + u.
Tensor4 postprocess(const Tensor4& y, const PreprocessConfig& cfg);

// Standard normal log density per batch entry.
std::vector<double> standard_normal_log_prob(const Tensor4& z);

// Handles for every Mint layer of a model on a tape, in block order.
struct FlowNodes {
  std::vector<MintNodes> layers;
};
FlowNodes record_params(ad::Tape& tape, const FlowModel& model, bool trainable);

struct FlowGraph {
  ad::Node latent;
  ad::Node log_det;   // (n,1,1,1) sum over Mint layers
  ad::Node log_prob;  // (n,1,1,1) base log density plus log_det
};
FlowGraph record_log_prob(ad::Tape& tape, const FlowModel& model, const FlowNodes& nodes, ad::Node x);

std::vector<double> log_prob(const FlowModel& model, const Tensor4& y);
Tensor4 encode(const FlowModel& model, const Tensor4& y);

struct DecodeReport {
  Tensor4 y;
  // Worst per-layer ||L(x) - z||^2 / D and the largest iteration count used.
  double max_layer_error = 0.0;
  std::size_t max_iterations = 0;
  std::size_t layers_converged = 0;
  std::size_t layers = 0;
};
// Inverts the flow block by block, starting each Mint layer from z / t.
// A DivergenceError names the failing layer.
DecodeReport decode(const FlowModel& model, const Tensor4& z, const SolverConfig& cfg);

// Bits per dimension of raw pixels, charging the dequantization and logit
// Jacobian so the value refers to the discrete data.
double bpd(const FlowModel& model, const Tensor4& raw, std::mt19937_64& rng);
double bpd_from(const std::vector<double>& log_prob, const std::vector<double>& logdet_pre,
                std::size_t dimension);

struct SampleResult {
  Tensor4 pixels;  // clamped to [0, levels - 1]
  Tensor4 latent;
  DecodeReport decode;
  // Fraction of decoded values outside [0, levels - 1] before clamping.
  double clamped_fraction = 0.0;
};
SampleResult sample(const FlowModel& model, std::size_t n, const SolverConfig& cfg, std::mt19937_64& rng);

struct InterpolationResult {
  std::size_t grid_n = 0;
  Tensor4 y;       // (grid_n * grid_n, c, h, w), row index phi, column phi'
  Tensor4 pixels;  // postprocessed and clamped
  DecodeReport decode;
};
// Latent grid z = cos(phi)(cos(phi') z1 + sin(phi') z2) + sin(phi)(cos(phi') z3 + sin(phi') z4)
// with phi, phi' stepping from 0 to pi/2 in grid_n values.
InterpolationResult interpolate(const FlowModel& model, const Tensor4& y1, const Tensor4& y2,
                                const Tensor4& y3, const Tensor4& y4, std::size_t grid_n,
                                const SolverConfig& cfg);
std::vector<double> interpolation_angles(std::size_t grid_n);

// Writes items of pixels (n, c, h, w) as a tiled 8-bit PGM (c == 1) or
// PPM (c == 3) image with `columns` tiles per row.
void write_image_grid(const std::string& path, const Tensor4& pixels, std::size_t columns);

}  // namespace mintnet
