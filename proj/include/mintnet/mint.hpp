#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mintnet/activation.hpp"
#include "mintnet/autodiff.hpp"
#include "mintnet/masks.hpp"
#include "mintnet/tensor.hpp"

namespace mintnet {

// Parameters of one Mint layer on C channels with K filter groups:
//
//   L(x) = t * x + (M3 .* W3) (*) h((M2 .* V2) (*) h((M1 .* W1) (*) x + b1) + b2) + b3
//
// where V2 is W2 with sign-corrected columns (see reparam_w2) and t = exp(log_t)
// is per channel. Biases and log_t are (1, n, 1, 1) tensors.
struct MintParams {
  std::size_t channels = 1;
  std::size_t k_groups = 1;
  std::size_t kernel = 3;
  Orientation orientation = Orientation::kLower;
  Activation activation;

  ConvWeight w1;  // (K*C, C, R, R)
  ConvWeight w2;  // (K*C, K*C, R, R)
  ConvWeight w3;  // (C, K*C, R, R)
  Tensor4 b1;     // (1, K*C, 1, 1)
  Tensor4 b2;     // (1, K*C, 1, 1)
  Tensor4 b3;     // (1, C, 1, 1)
  Tensor4 log_t;  // (1, C, 1, 1)

  // Zero weights and biases with t = 1: the identity map.
  static MintParams zeros(std::size_t channels, std::size_t k_groups, std::size_t kernel,
                          Orientation orientation, Activation activation = Activation());

  std::size_t hidden() const { return k_groups * channels; }
  Tensor4 t() const;
};

// Named view of one trainable tensor.
struct ParamRef {
  std::string name;
  Shape4 shape;
  std::span<double> data;
};
// Trainable tensors in a fixed order: w1, w2, w3, b1, b2, b3, log_t.
std::vector<ParamRef> parameters(MintParams& p, const std::string& prefix = "");

// Read-only counterpart of ParamRef.
struct ParamView {
  std::string name;
  Shape4 shape;
  std::span<const double> data;
};
std::vector<ParamView> parameter_views(const MintParams& p, const std::string& prefix = "");

// Same-channel center taps of each weight: d1 (K, C), d2 (K, K, C), d3 (K, C).
struct CenterDiags {
  std::vector<double> d1;
  std::vector<double> d2;
  std::vector<double> d3;
  std::size_t k_groups = 0;
  std::size_t channels = 0;
  double one(std::size_t j, std::size_t c) const { return d1[j * channels + c]; }
  double two(std::size_t i, std::size_t j, std::size_t c) const {
    return d2[(i * k_groups + j) * channels + c];
  }
  double three(std::size_t i, std::size_t c) const { return d3[i * channels + c]; }
};
CenterDiags center_diags(const MintParams& p);

// Per-column signs s with V2 = W2 .* s: block (i, j), input channel c gets
// sign(d2[i,j,c]) * sign(d3[i,c] * d1[j,c]), with sign(0) = 0.
Tensor4 reparam_signs(const MintParams& p);
ConvWeight reparam_w2(const MintParams& p);

// Tape handles for a layer's tensors.
struct MintNodes {
  ad::Node w1, w2, w3, b1, b2, b3, log_t;
};
// Records the layer tensors as leaves (trainable) or constants.
MintNodes record_params(ad::Tape& tape, const MintParams& p, bool trainable);

struct MintGraph {
  ad::Node output;
  ad::Node diag;     // valid only when requested
  ad::Node log_det;  // (n,1,1,1); valid only when diag was requested
};
// Records the layer on `tape`. The masks and the reparameterization signs are
// constants, so backward treats sign(.) as locally constant.
MintGraph record_mint(ad::Tape& tape, const MintParams& p, const MintNodes& nodes, ad::Node x,
                      bool with_log_det);

Tensor4 forward(const MintParams& p, const Tensor4& x);
// Diagonal of the layer Jacobian at every coordinate of x; strictly positive.
Tensor4 jac_diag(const MintParams& p, const Tensor4& x);
// Sum of log jac_diag per batch entry.
std::vector<double> log_det(const MintParams& p, const Tensor4& x);

struct InitScheme {
  // Weight std is scale / sqrt(fan_in).
  double scale = 0.05;
  Activation activation;
};
MintParams init(std::size_t channels, std::size_t k_groups, std::size_t kernel,
                Orientation orientation, std::mt19937_64& rng, const InitScheme& scheme = {});

}  // namespace mintnet
