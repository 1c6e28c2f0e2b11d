#pragma once

#include <random>

#include "mintnet/mint.hpp"

namespace oracle {

// Mint layer with every tensor drawn at random, not just the weights.
inline mintnet::MintParams random_layer(std::size_t c, std::size_t k, std::size_t r, mintnet::Orientation o,
                                        std::mt19937_64& rng, double weight_std = 0.4,
                                        mintnet::Activation act = mintnet::Activation()) {
  mintnet::MintParams p = mintnet::MintParams::zeros(c, k, r, o, act);
  std::normal_distribution<double> w(0.0, weight_std), b(0.0, 0.5), lt(0.0, 0.3);
  for (double& v : p.w1.data()) v = w(rng);
  for (double& v : p.w2.data()) v = w(rng);
  for (double& v : p.w3.data()) v = w(rng);
  for (double& v : p.b1.data()) v = b(rng);
  for (double& v : p.b2.data()) v = b(rng);
  for (double& v : p.b3.data()) v = b(rng);
  for (double& v : p.log_t.data()) v = lt(rng);
  return p;
}

}  // namespace oracle
