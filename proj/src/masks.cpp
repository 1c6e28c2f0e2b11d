#include "mintnet/masks.hpp"

#include "mintnet/errors.hpp"

namespace mintnet {

std::string to_string(Orientation o) { return o == Orientation::kLower ? "lower" : "upper"; }

Orientation orientation_from_string(const std::string& s) {
  if (s == "lower") return Orientation::kLower;
  if (s == "upper") return Orientation::kUpper;
  throw ConfigError("unknown orientation '" + s + "'");
}

namespace {

bool lower_keeps(std::size_t i, std::size_t j, std::size_t m, std::size_t n, std::size_t mid) {
  if (i < j) return false;
  if (i == j && m > mid) return false;
  if (i == j && m == mid && n > mid) return false;
  return true;
}

bool upper_keeps(std::size_t i, std::size_t j, std::size_t m, std::size_t n, std::size_t mid) {
  if (i > j) return false;
  if (i == j && m < mid) return false;
  if (i == j && m == mid && n < mid) return false;
  return true;
}

}  // namespace

Mask base_mask(std::size_t channels, std::size_t kernel, Orientation o) {
  return grouped_mask(channels, 1, 1, kernel, o);
}

Mask grouped_mask(std::size_t channels, std::size_t g_out, std::size_t g_in, std::size_t kernel,
                  Orientation o) {
  if (kernel % 2 == 0) throw ShapeError("mask kernel size must be odd, got " + std::to_string(kernel));
  if (channels == 0) throw ShapeError("mask needs at least one channel");
  if (g_out == 0 || g_in == 0) throw ShapeError("mask group counts must be positive");
  const std::size_t mid = kernel / 2;
  Mask mask({g_out * channels, g_in * channels, kernel, kernel});
  for (std::size_t a = 0; a < g_out; ++a)
    for (std::size_t i = 0; i < channels; ++i)
      for (std::size_t b = 0; b < g_in; ++b)
        for (std::size_t j = 0; j < channels; ++j)
          for (std::size_t m = 0; m < kernel; ++m)
            for (std::size_t n = 0; n < kernel; ++n) {
              const bool keep = o == Orientation::kLower ? lower_keeps(i, j, m, n, mid)
                                                         : upper_keeps(i, j, m, n, mid);
              mask(a * channels + i, b * channels + j, m, n) = keep ? 1.0 : 0.0;
            }
  return mask;
}

DenseOperator dense_conv_operator(const Tensor4& weight, std::size_t h, std::size_t w) {
  const Shape4& ws = weight.shape();
  const std::size_t rows = ws.n * h * w;
  const std::size_t cols = ws.c * h * w;
  if (rows > kMaxOracleDim || cols > kMaxOracleDim) {
    throw ShapeError("dense operator " + std::to_string(rows) + "x" + std::to_string(cols) +
                     " exceeds the oracle limit of " + std::to_string(kMaxOracleDim));
  }
  const auto r = static_cast<std::ptrdiff_t>(ws.h);
  const std::ptrdiff_t pad = r / 2;
  DenseOperator op{rows, cols, std::vector<double>(rows * cols, 0.0)};
  // Row (co, y, x) picks up w[co, ci, m, q] * input(ci, y + m - pad, x + q - pad).
  for (std::size_t co = 0; co < ws.n; ++co)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t row = (co * h + y) * w + x;
        for (std::size_t ci = 0; ci < ws.c; ++ci)
          for (std::ptrdiff_t m = 0; m < r; ++m)
            for (std::ptrdiff_t q = 0; q < r; ++q) {
              const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + m - pad;
              const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x) + q - pad;
              if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(h) ||
                  xx >= static_cast<std::ptrdiff_t>(w)) {
                continue;
              }
              const std::size_t col = (ci * h + static_cast<std::size_t>(yy)) * w +
                                      static_cast<std::size_t>(xx);
              op.a[row * cols + col] +=
                  weight(co, ci, static_cast<std::size_t>(m), static_cast<std::size_t>(q));
            }
      }
  return op;
}

bool triangularity_oracle(const ConvWeight& w, const Mask& mask, Orientation o, std::size_t h,
                          std::size_t wpx) {
  if (mask.shape() != w.tensor().shape()) {
    throw ShapeError("mask " + mask.shape().str() + " does not match weight " +
                     w.tensor().shape().str());
  }
  const DenseOperator op = dense_conv_operator(mul(mask, w.tensor()), h, wpx);
  if (op.rows != op.cols) {
    throw ShapeError("triangularity needs a square operator, got " + std::to_string(op.rows) + "x" +
                     std::to_string(op.cols));
  }
  for (std::size_t r = 0; r < op.rows; ++r)
    for (std::size_t c = 0; c < op.cols; ++c) {
      const bool off_triangle = o == Orientation::kLower ? c > r : c < r;
      if (off_triangle && op(r, c) != 0.0) return false;
    }
  return true;
}

}  // namespace mintnet
