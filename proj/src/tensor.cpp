#include "mintnet/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <utility>

#include "mintnet/errors.hpp"

namespace mintnet {

std::size_t Shape4::operator[](std::size_t axis) const {
  switch (axis) {
    case 0: return n;
    case 1: return c;
    case 2: return h;
    case 3: return w;
    default: throw std::out_of_range("Shape4 axis " + std::to_string(axis));
  }
}

std::string Shape4::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

Tensor4::Tensor4(Shape4 shape, double fill) : shape_(shape), data_(shape.numel(), fill) {}

Tensor4::Tensor4(Shape4 shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.numel()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_.str());
  }
}

Tensor4 Tensor4::slice_batch(std::size_t first, std::size_t count) const {
  if (first + count > shape_.n) {
    throw ShapeError("batch slice [" + std::to_string(first) + ", " +
                     std::to_string(first + count) + ") out of range for " + shape_.str());
  }
  const std::size_t per = shape_.per_item();
  Shape4 s = shape_;
  s.n = count;
  std::vector<double> d(data_.begin() + static_cast<std::ptrdiff_t>(first * per),
                        data_.begin() + static_cast<std::ptrdiff_t>((first + count) * per));
  return Tensor4(s, std::move(d));
}

Tensor4 Tensor4::reshaped(Shape4 shape) const {
  if (shape.numel() != shape_.numel()) {
    throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
  }
  return Tensor4(shape, data_);
}

bool Tensor4::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

ConvWeight::ConvWeight(std::size_t c_out, std::size_t c_in, std::size_t r, double fill)
    : ConvWeight(Tensor4({c_out, c_in, r, r}, fill)) {}

ConvWeight::ConvWeight(Tensor4 t) : t_(std::move(t)) {
  const Shape4& s = t_.shape();
  if (s.n == 0 || s.c == 0) throw ShapeError("conv weight needs c_out, c_in >= 1, got " + s.str());
  if (s.h != s.w || s.h % 2 == 0) {
    throw ShapeError("conv weight kernel must be square with odd size, got " + s.str());
  }
}

namespace kernels {
namespace {

void check_conv(const Shape4& xs, const Shape4& ws) {
  if (ws.h != ws.w || ws.h % 2 == 0) {
    throw ShapeError("conv2d kernel must be square and odd, weight " + ws.str());
  }
  if (xs.c != ws.c) {
    throw ShapeError("conv2d channel mismatch: input " + xs.str() + " vs weight " + ws.str());
  }
}

// Valid output range [lo, hi) along one axis for kernel offset d.
std::pair<std::size_t, std::size_t> span_for(std::ptrdiff_t d, std::size_t len) {
  const auto n = static_cast<std::ptrdiff_t>(len);
  const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -d);
  const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(n, n - d);
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

std::size_t shifted(std::size_t i, std::ptrdiff_t d) {
  return static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + d);
}

}  // namespace

Tensor4 conv2d_forward(const Tensor4& x, const Tensor4& w) {
  const Shape4& xs = x.shape();
  const Shape4& ws = w.shape();
  check_conv(xs, ws);
  const std::size_t r = ws.h;
  const auto pad = static_cast<std::ptrdiff_t>(r / 2);
  const std::size_t H = xs.h, W = xs.w;
  Tensor4 out({xs.n, ws.n, H, W});
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t co = 0; co < ws.n; ++co) {
      double* o = &out(n, co, 0, 0);
      for (std::size_t ci = 0; ci < ws.c; ++ci) {
        const double* in = &x(n, ci, 0, 0);
        for (std::size_t m = 0; m < r; ++m) {
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(m) - pad;
          const auto [y0, y1] = span_for(dy, H);
          for (std::size_t q = 0; q < r; ++q) {
            const double wv = w(co, ci, m, q);
            if (wv == 0.0) continue;
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(q) - pad;
            const auto [x0, x1] = span_for(dx, W);
            for (std::size_t y = y0; y < y1; ++y) {
              double* orow = o + y * W;
              const double* irow = in + shifted(y, dy) * W + shifted(x0, dx);
              for (std::size_t xx = x0; xx < x1; ++xx) orow[xx] += wv * irow[xx - x0];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor4 conv2d_grad_input(const Tensor4& grad_out, const Tensor4& w) {
  const Shape4& gs = grad_out.shape();
  const Shape4& ws = w.shape();
  if (gs.c != ws.n) {
    throw ShapeError("conv2d backward: grad " + gs.str() + " vs weight " + ws.str());
  }
  const std::size_t r = ws.h;
  const auto pad = static_cast<std::ptrdiff_t>(r / 2);
  const std::size_t H = gs.h, W = gs.w;
  Tensor4 gx({gs.n, ws.c, H, W});
  for (std::size_t n = 0; n < gs.n; ++n) {
    for (std::size_t co = 0; co < ws.n; ++co) {
      const double* g = &grad_out(n, co, 0, 0);
      for (std::size_t ci = 0; ci < ws.c; ++ci) {
        double* dst = &gx(n, ci, 0, 0);
        for (std::size_t m = 0; m < r; ++m) {
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(m) - pad;
          const auto [y0, y1] = span_for(dy, H);
          for (std::size_t q = 0; q < r; ++q) {
            const double wv = w(co, ci, m, q);
            if (wv == 0.0) continue;
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(q) - pad;
            const auto [x0, x1] = span_for(dx, W);
            for (std::size_t y = y0; y < y1; ++y) {
              const double* grow = g + y * W;
              double* drow = dst + shifted(y, dy) * W + shifted(x0, dx);
              for (std::size_t xx = x0; xx < x1; ++xx) drow[xx - x0] += wv * grow[xx];
            }
          }
        }
      }
    }
  }
  return gx;
}

Tensor4 conv2d_grad_weight(const Tensor4& x, const Tensor4& grad_out, std::size_t r) {
  const Shape4& xs = x.shape();
  const Shape4& gs = grad_out.shape();
  if (xs.n != gs.n || xs.h != gs.h || xs.w != gs.w) {
    throw ShapeError("conv2d weight grad: input " + xs.str() + " vs grad " + gs.str());
  }
  const auto pad = static_cast<std::ptrdiff_t>(r / 2);
  const std::size_t H = xs.h, W = xs.w;
  Tensor4 gw({gs.c, xs.c, r, r});
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t co = 0; co < gs.c; ++co) {
      const double* g = &grad_out(n, co, 0, 0);
      for (std::size_t ci = 0; ci < xs.c; ++ci) {
        const double* in = &x(n, ci, 0, 0);
        for (std::size_t m = 0; m < r; ++m) {
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(m) - pad;
          const auto [y0, y1] = span_for(dy, H);
          for (std::size_t q = 0; q < r; ++q) {
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(q) - pad;
            const auto [x0, x1] = span_for(dx, W);
            double acc = 0.0;
            for (std::size_t y = y0; y < y1; ++y) {
              const double* grow = g + y * W;
              const double* irow = in + shifted(y, dy) * W + shifted(x0, dx);
              for (std::size_t xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx - x0];
            }
            gw(co, ci, m, q) += acc;
          }
        }
      }
    }
  }
  return gw;
}

}  // namespace kernels

Tensor4 conv2d(const Tensor4& x, const ConvWeight& w, std::span<const double> bias) {
  if (!bias.empty() && bias.size() != w.c_out()) {
    throw ShapeError("conv2d bias length " + std::to_string(bias.size()) + " vs " +
                     std::to_string(w.c_out()) + " output channels");
  }
  Tensor4 out = kernels::conv2d_forward(x, w.tensor());
  if (!bias.empty()) {
    const Shape4& s = out.shape();
    const std::size_t plane = s.h * s.w;
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t c = 0; c < s.c; ++c) {
        double* p = &out(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) p[i] += bias[c];
      }
    }
  }
  return out;
}

Shape4 broadcast_shape(const Shape4& a, const Shape4& b) {
  std::array<std::size_t, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t ea = a[i], eb = b[i];
    if (ea == eb || eb == 1) {
      out[i] = ea;
    } else if (ea == 1) {
      out[i] = eb;
    } else {
      throw ShapeError("shapes " + a.str() + " and " + b.str() + " are not broadcastable");
    }
  }
  return {out[0], out[1], out[2], out[3]};
}

namespace {

template <typename Op>
Tensor4 broadcast_binary(const Tensor4& a, const Tensor4& b, Op op) {
  const Shape4& as = a.shape();
  const Shape4& bs = b.shape();
  if (as == bs) {
    Tensor4 out(as);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = op(a[i], b[i]);
    return out;
  }
  const Shape4 s = broadcast_shape(as, bs);
  Tensor4 out(s);
  std::size_t k = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    const std::size_t an = as.n == 1 ? 0 : n, bn = bs.n == 1 ? 0 : n;
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t ac = as.c == 1 ? 0 : c, bc = bs.c == 1 ? 0 : c;
      for (std::size_t y = 0; y < s.h; ++y) {
        const std::size_t ay = as.h == 1 ? 0 : y, by = bs.h == 1 ? 0 : y;
        for (std::size_t x = 0; x < s.w; ++x, ++k) {
          const std::size_t ax = as.w == 1 ? 0 : x, bx = bs.w == 1 ? 0 : x;
          out[k] = op(a(an, ac, ay, ax), b(bn, bc, by, bx));
        }
      }
    }
  }
  return out;
}

}  // namespace

Tensor4 sum_to(const Tensor4& g, const Shape4& target) {
  const Shape4& gs = g.shape();
  if (gs == target) return g;
  for (std::size_t i = 0; i < 4; ++i) {
    if (target[i] != gs[i] && target[i] != 1) {
      throw ShapeError("cannot reduce " + gs.str() + " to " + target.str());
    }
  }
  Tensor4 out(target);
  std::size_t k = 0;
  for (std::size_t n = 0; n < gs.n; ++n) {
    const std::size_t tn = target.n == 1 ? 0 : n;
    for (std::size_t c = 0; c < gs.c; ++c) {
      const std::size_t tc = target.c == 1 ? 0 : c;
      for (std::size_t y = 0; y < gs.h; ++y) {
        const std::size_t ty = target.h == 1 ? 0 : y;
        for (std::size_t x = 0; x < gs.w; ++x, ++k) {
          out(tn, tc, ty, target.w == 1 ? 0 : x) += g[k];
        }
      }
    }
  }
  return out;
}

Tensor4 map(const Tensor4& x, const std::function<double(double)>& f) {
  Tensor4 out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

Tensor4 add(const Tensor4& a, const Tensor4& b) {
  return broadcast_binary(a, b, [](double u, double v) { return u + v; });
}
Tensor4 sub(const Tensor4& a, const Tensor4& b) {
  return broadcast_binary(a, b, [](double u, double v) { return u - v; });
}
Tensor4 mul(const Tensor4& a, const Tensor4& b) {
  return broadcast_binary(a, b, [](double u, double v) { return u * v; });
}
Tensor4 div(const Tensor4& a, const Tensor4& b) {
  return broadcast_binary(a, b, [](double u, double v) { return u / v; });
}

Tensor4 scale(const Tensor4& a, double s) {
  Tensor4 out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = s * a[i];
  return out;
}

Tensor4 reduce_sum(const Tensor4& x, Axes axes) {
  const Shape4& s = x.shape();
  return sum_to(x, {axes.n ? 1 : s.n, axes.c ? 1 : s.c, axes.h ? 1 : s.h, axes.w ? 1 : s.w});
}

double sum(const Tensor4& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return acc;
}

double normalized_l2(const Tensor4& a, const Tensor4& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("normalized_l2 shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
  }
  if (a.size() == 0) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

double max_abs_diff(const Tensor4& a, const Tensor4& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor4 squeeze(const Tensor4& x, std::size_t k) {
  const Shape4& s = x.shape();
  if (k == 0 || s.h % k != 0 || s.w % k != 0) {
    throw ShapeError("squeeze factor " + std::to_string(k) + " does not divide spatial dims of " +
                     s.str());
  }
  Tensor4 out({s.n, s.c * k * k, s.h / k, s.w / k});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t xx = 0; xx < s.w; ++xx)
          out(n, c * k * k + (y % k) * k + xx % k, y / k, xx / k) = x(n, c, y, xx);
  return out;
}

Tensor4 unsqueeze(const Tensor4& x, std::size_t k) {
  const Shape4& s = x.shape();
  if (k == 0 || s.c % (k * k) != 0) {
    throw ShapeError("unsqueeze factor " + std::to_string(k) + " does not divide channels of " +
                     s.str());
  }
  const std::size_t c_out = s.c / (k * k);
  Tensor4 out({s.n, c_out, s.h * k, s.w * k});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < c_out; ++c)
      for (std::size_t y = 0; y < s.h * k; ++y)
        for (std::size_t xx = 0; xx < s.w * k; ++xx)
          out(n, c, y, xx) = x(n, c * k * k + (y % k) * k + xx % k, y / k, xx / k);
  return out;
}

}  // namespace mintnet
