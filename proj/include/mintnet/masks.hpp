#pragma once

#include <cstddef>
#include <string>

#include "mintnet/tensor.hpp"

namespace mintnet {

// Which triangle of the Jacobian a masked layer occupies.
enum class Orientation { kLower, kUpper };

std::string to_string(Orientation o);
Orientation orientation_from_string(const std::string& s);
inline Orientation flipped(Orientation o) {
  return o == Orientation::kLower ? Orientation::kUpper : Orientation::kLower;
}

// Binary mask of shape (c_out, c_in, r, r), stored as 0/1 doubles so it can
// be applied with an elementwise product.
using Mask = Tensor4;

// Causal mask on c channels. For the lower orientation entry (i, j, m, n) is
// zero iff i < j, or i == j with (m, n) after the kernel center in raster
// order. The upper orientation is its point reflection.
Mask base_mask(std::size_t channels, std::size_t kernel, Orientation o);

// base_mask tiled g_out x g_in times: entry (a*c + i, b*c + j, m, n) equals
// base entry (i, j, m, n).
Mask grouped_mask(std::size_t channels, std::size_t g_out, std::size_t g_in, std::size_t kernel,
                  Orientation o);

// Largest dense operator triangularity_oracle will assemble.
inline constexpr std::size_t kMaxOracleDim = 4096;

// Dense matrix of x -> conv2d(x, mask .* w) for one item of (c_in, h, w),
// indexed [row * cols + col] with flat index c*h*w + y*w + x.
struct DenseOperator {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> a;
  double operator()(std::size_t r, std::size_t c) const { return a[r * cols + c]; }
};
DenseOperator dense_conv_operator(const Tensor4& weight, std::size_t h, std::size_t w);

// True when the dense operator of conv2d with weight mask .* w on an h x wpx
// image is triangular in orientation o. Requires a square operator.
bool triangularity_oracle(const ConvWeight& w, const Mask& mask, Orientation o, std::size_t h,
                          std::size_t wpx);

}  // namespace mintnet
