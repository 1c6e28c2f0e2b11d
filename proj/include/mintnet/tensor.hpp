#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace mintnet {

// Extents of a rank-4 (batch, channel, height, width) array.
struct Shape4 {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t numel() const { return n * c * h * w; }
  // Elements per batch entry.
  std::size_t per_item() const { return c * h * w; }
  std::size_t operator[](std::size_t axis) const;
  bool operator==(const Shape4&) const = default;
  std::string str() const;
};

// Dense rank-4 array of doubles in row-major (n, c, h, w) order.
//
// Flattening an item gives index c*H*W + y*W + x. Masks are built so that
// convolutions are triangular under exactly this ordering.
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 shape, double fill = 0.0);
  Tensor4(Shape4 shape, std::vector<double> data);

  static Tensor4 zeros(Shape4 shape) { return Tensor4(shape, 0.0); }
  static Tensor4 ones(Shape4 shape) { return Tensor4(shape, 1.0); }
  static Tensor4 scalar(double v) { return Tensor4({1, 1, 1, 1}, v); }

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  double& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[offset(n, c, y, x)];
  }
  const double& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[offset(n, c, y, x)];
  }

  // Copy of batch entries [first, first + count).
  Tensor4 slice_batch(std::size_t first, std::size_t count) const;
  // Same data, new extents with equal element count.
  Tensor4 reshaped(Shape4 shape) const;
  bool all_finite() const;

  bool operator==(const Tensor4&) const = default;

 private:
  Shape4 shape_;
  std::vector<double> data_;
};

// Convolution kernel of shape (c_out, c_in, r, r) with r odd.
class ConvWeight {
 public:
  ConvWeight() = default;
  ConvWeight(std::size_t c_out, std::size_t c_in, std::size_t r, double fill = 0.0);
  explicit ConvWeight(Tensor4 t);

  std::size_t c_out() const { return t_.shape().n; }
  std::size_t c_in() const { return t_.shape().c; }
  std::size_t kernel() const { return t_.shape().h; }
  const Tensor4& tensor() const { return t_; }
  std::span<double> data() { return t_.data(); }
  std::span<const double> data() const { return t_.data(); }
  double& operator()(std::size_t o, std::size_t i, std::size_t m, std::size_t q) {
    return t_(o, i, m, q);
  }
  const double& operator()(std::size_t o, std::size_t i, std::size_t m, std::size_t q) const {
    return t_(o, i, m, q);
  }

 private:
  Tensor4 t_;
};

// Same-shape 2-D cross-correlation with zero padding r/2 and per-output-channel
// bias (empty span means no bias).
Tensor4 conv2d(const Tensor4& x, const ConvWeight& w, std::span<const double> bias = {});

namespace kernels {

// Raw kernels over a (c_out, c_in, r, r) weight tensor; used by the tape.
Tensor4 conv2d_forward(const Tensor4& x, const Tensor4& w);
Tensor4 conv2d_grad_input(const Tensor4& grad_out, const Tensor4& w);
Tensor4 conv2d_grad_weight(const Tensor4& x, const Tensor4& grad_out, std::size_t r);

}  // namespace kernels

// Shape produced by broadcasting a against b: every axis must match or be 1.
Shape4 broadcast_shape(const Shape4& a, const Shape4& b);
// Sums g over the axes along which target has extent 1.
Tensor4 sum_to(const Tensor4& g, const Shape4& target);

Tensor4 map(const Tensor4& x, const std::function<double(double)>& f);
Tensor4 add(const Tensor4& a, const Tensor4& b);
Tensor4 sub(const Tensor4& a, const Tensor4& b);
Tensor4 mul(const Tensor4& a, const Tensor4& b);
Tensor4 div(const Tensor4& a, const Tensor4& b);
Tensor4 scale(const Tensor4& a, double s);

// Axis selection for reduce_sum.
struct Axes {
  bool n = false;
  bool c = false;
  bool h = false;
  bool w = false;
  static constexpr Axes all() { return {true, true, true, true}; }
};
// Sum over the selected axes, keeping them with extent 1.
Tensor4 reduce_sum(const Tensor4& x, Axes axes);
double sum(const Tensor4& x);

// ||a - b||^2 / numel, the normalized L2 distance.
double normalized_l2(const Tensor4& a, const Tensor4& b);
double max_abs_diff(const Tensor4& a, const Tensor4& b);

// Space-to-depth with factor k: channel c*k*k + dy*k + dx of the output holds
// input pixel (y*k + dy, x*k + dx) of channel c.
Tensor4 squeeze(const Tensor4& x, std::size_t k);
Tensor4 unsqueeze(const Tensor4& x, std::size_t k);

}  // namespace mintnet
