#include "mintnet/mint.hpp"

#include <cmath>

#include "mintnet/errors.hpp"

namespace mintnet {

MintParams MintParams::zeros(std::size_t channels, std::size_t k_groups, std::size_t kernel,
                             Orientation orientation, Activation activation) {
  if (channels == 0 || k_groups == 0) throw ShapeError("Mint layer needs C >= 1 and K >= 1");
  if (kernel % 2 == 0) throw ShapeError("Mint layer kernel must be odd, got " + std::to_string(kernel));
  const std::size_t kc = k_groups * channels;
  MintParams p;
  p.channels = channels;
  p.k_groups = k_groups;
  p.kernel = kernel;
  p.orientation = orientation;
  p.activation = activation;
  p.w1 = ConvWeight(kc, channels, kernel);
  p.w2 = ConvWeight(kc, kc, kernel);
  p.w3 = ConvWeight(channels, kc, kernel);
  p.b1 = Tensor4::zeros({1, kc, 1, 1});
  p.b2 = Tensor4::zeros({1, kc, 1, 1});
  p.b3 = Tensor4::zeros({1, channels, 1, 1});
  p.log_t = Tensor4::zeros({1, channels, 1, 1});
  return p;
}

Tensor4 MintParams::t() const {
  return map(log_t, [](double v) { return std::exp(v); });
}

std::vector<ParamRef> parameters(MintParams& p, const std::string& prefix) {
  return {
      {prefix + "w1", p.w1.tensor().shape(), p.w1.data()},
      {prefix + "w2", p.w2.tensor().shape(), p.w2.data()},
      {prefix + "w3", p.w3.tensor().shape(), p.w3.data()},
      {prefix + "b1", p.b1.shape(), p.b1.data()},
      {prefix + "b2", p.b2.shape(), p.b2.data()},
      {prefix + "b3", p.b3.shape(), p.b3.data()},
      {prefix + "log_t", p.log_t.shape(), p.log_t.data()},
  };
}

std::vector<ParamView> parameter_views(const MintParams& p, const std::string& prefix) {
  return {
      {prefix + "w1", p.w1.tensor().shape(), p.w1.data()},
      {prefix + "w2", p.w2.tensor().shape(), p.w2.data()},
      {prefix + "w3", p.w3.tensor().shape(), p.w3.data()},
      {prefix + "b1", p.b1.shape(), p.b1.data()},
      {prefix + "b2", p.b2.shape(), p.b2.data()},
      {prefix + "b3", p.b3.shape(), p.b3.data()},
      {prefix + "log_t", p.log_t.shape(), p.log_t.data()},
  };
}

CenterDiags center_diags(const MintParams& p) {
  const std::size_t K = p.k_groups, C = p.channels, mid = p.kernel / 2;
  CenterDiags d;
  d.k_groups = K;
  d.channels = C;
  d.d1.resize(K * C);
  d.d2.resize(K * K * C);
  d.d3.resize(K * C);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      d.d1[i * C + c] = p.w1(i * C + c, c, mid, mid);
      d.d3[i * C + c] = p.w3(c, i * C + c, mid, mid);
      for (std::size_t j = 0; j < K; ++j) d.d2[(i * K + j) * C + c] = p.w2(i * C + c, j * C + c, mid, mid);
    }
  return d;
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

Tensor4 reparam_signs(const MintParams& p) {
  const std::size_t K = p.k_groups, C = p.channels, R = p.kernel;
  const CenterDiags d = center_diags(p);
  Tensor4 s({K * C, K * C, R, R});
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j)
      for (std::size_t c = 0; c < C; ++c) {
        const double v = sign(d.two(i, j, c)) * sign(d.three(i, c) * d.one(j, c));
        // Column c of block (i, j): every output channel of group i.
        for (std::size_t co = 0; co < C; ++co)
          for (std::size_t m = 0; m < R; ++m)
            for (std::size_t q = 0; q < R; ++q) s(i * C + co, j * C + c, m, q) = v;
      }
  return s;
}

ConvWeight reparam_w2(const MintParams& p) { return ConvWeight(mul(p.w2.tensor(), reparam_signs(p))); }

MintNodes record_params(ad::Tape& tape, const MintParams& p, bool trainable) {
  auto rec = [&](const Tensor4& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
  return {rec(p.w1.tensor()), rec(p.w2.tensor()), rec(p.w3.tensor()), rec(p.b1),
          rec(p.b2),          rec(p.b3),          rec(p.log_t)};
}

MintGraph record_mint(ad::Tape& tape, const MintParams& p, const MintNodes& nodes, ad::Node x,
                      bool with_log_det) {
  const Shape4& xs = tape.value(x).shape();
  if (xs.c != p.channels) {
    throw ShapeError("Mint layer expects " + std::to_string(p.channels) + " channels, input is " +
                     xs.str());
  }
  const std::size_t K = p.k_groups, C = p.channels, R = p.kernel;
  const Orientation o = p.orientation;
  const Activation act = p.activation;

  const ad::Node m1 = tape.constant(grouped_mask(C, K, 1, R, o));
  const ad::Node m2 = tape.constant(mul(grouped_mask(C, K, K, R, o), reparam_signs(p)));
  const ad::Node m3 = tape.constant(grouped_mask(C, 1, K, R, o));
  const ad::Node w1 = tape.mul(nodes.w1, m1);
  const ad::Node w2 = tape.mul(nodes.w2, m2);
  const ad::Node w3 = tape.mul(nodes.w3, m3);

  const ad::Node u1 = tape.add(tape.conv2d(x, w1), nodes.b1);
  const ad::Node a1 = tape.activation(u1, act);
  const ad::Node u2 = tape.add(tape.conv2d(a1, w2), nodes.b2);
  const ad::Node a2 = tape.activation(u2, act);
  const ad::Node t = tape.exp(nodes.log_t);
  const ad::Node residual = tape.add(tape.conv2d(a2, w3), nodes.b3);
  MintGraph g;
  g.output = tape.add(tape.mul(x, t), residual);
  if (!with_log_det) return g;

  // diag J at (c, p) = sum_i d3[i,c] A_i(c,p) sum_j d2'[i,j,c] B_j(c,p) d1[j,c] + t_c
  const ad::Node d1 = tape.reshape(tape.center_diag(w1, C), {1, K, C, 1});
  const ad::Node d2 = tape.center_diag(w2, C);
  const ad::Node d3 = tape.center_diag(w3, C);
  const ad::Node inner = tape.group_mix(tape.activation_grad(u1, act), tape.mul(d2, d1));
  const ad::Node outer = tape.group_mix(tape.mul(tape.activation_grad(u2, act), inner), d3);
  g.diag = tape.add(outer, t);
  g.log_det = tape.sum_per_item(tape.log(g.diag));
  return g;
}

Tensor4 forward(const MintParams& p, const Tensor4& x) {
  ad::Tape tape;
  const MintNodes nodes = record_params(tape, p, false);
  return tape.value(record_mint(tape, p, nodes, tape.constant(x), false).output);
}

Tensor4 jac_diag(const MintParams& p, const Tensor4& x) {
  ad::Tape tape;
  const MintNodes nodes = record_params(tape, p, false);
  return tape.value(record_mint(tape, p, nodes, tape.constant(x), true).diag);
}

std::vector<double> log_det(const MintParams& p, const Tensor4& x) {
  ad::Tape tape;
  const MintNodes nodes = record_params(tape, p, false);
  return tape.value(record_mint(tape, p, nodes, tape.constant(x), true).log_det).vec();
}

MintParams init(std::size_t channels, std::size_t k_groups, std::size_t kernel,
                Orientation orientation, std::mt19937_64& rng, const InitScheme& scheme) {
  MintParams p = MintParams::zeros(channels, k_groups, kernel, orientation, scheme.activation);
  auto fill = [&](ConvWeight& w) {
    const double fan_in = static_cast<double>(w.c_in() * w.kernel() * w.kernel());
    std::normal_distribution<double> normal(0.0, scheme.scale / std::sqrt(fan_in));
    for (double& v : w.data()) v = normal(rng);
  };
  fill(p.w1);
  fill(p.w2);
  fill(p.w3);
  return p;
}

}  // namespace mintnet
