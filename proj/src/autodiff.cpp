#include "mintnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mintnet/errors.hpp"

namespace mintnet {

Activation Activation::from_name(const std::string& name) {
  if (name == "elu") return Activation(Kind::kElu);
  if (name == "tanh") return Activation(Kind::kTanh);
  throw ConfigError("unknown activation '" + name + "' (expected elu or tanh)");
}

std::string Activation::name() const { return kind_ == Kind::kElu ? "elu" : "tanh"; }

namespace ad {

const Tensor4& Gradients::of(Node leaf) const {
  if (leaf.id >= by_node_.size()) {
    throw UnknownNodeError("no gradient slot for node " + std::to_string(leaf.id));
  }
  return by_node_[leaf.id];
}

const Tape::Record& Tape::at(Node node) const {
  if (node.id >= nodes_.size()) {
    throw UnknownNodeError("node " + std::to_string(node.id) + " is not on the tape (size " +
                           std::to_string(nodes_.size()) + ")");
  }
  return nodes_[node.id];
}

const Tensor4& Tape::value(Node node) const { return at(node).value; }

Op Tape::op(Node node) const { return at(node).op; }

Node Tape::push(Record r) {
  nodes_.push_back(std::move(r));
  return Node{nodes_.size() - 1};
}

Node Tape::unary(Op op, Node a, Tensor4 value) {
  Record r{op, a, a, std::move(value), false, 0.0, 0, {}};
  r.needs_grad = at(a).needs_grad;
  return push(std::move(r));
}

Node Tape::binary(Op op, Node a, Node b, Tensor4 value) {
  Record r{op, a, b, std::move(value), false, 0.0, 0, {}};
  r.needs_grad = at(a).needs_grad || at(b).needs_grad;
  return push(std::move(r));
}

Node Tape::leaf(Tensor4 value) {
  Record r{Op::kLeaf, {}, {}, std::move(value), false, 0.0, 0, {}};
  r.needs_grad = true;
  return push(std::move(r));
}

Node Tape::constant(Tensor4 value) { return push(Record{Op::kConstant, {}, {}, std::move(value), false, 0.0, 0, {}}); }

Node Tape::add(Node a, Node b) { return binary(Op::kAdd, a, b, mintnet::add(value(a), value(b))); }

Node Tape::sub(Node a, Node b) { return binary(Op::kSub, a, b, mintnet::sub(value(a), value(b))); }

Node Tape::mul(Node a, Node b) { return binary(Op::kMul, a, b, mintnet::mul(value(a), value(b))); }

Node Tape::scale(Node a, double s) {
  Node n = unary(Op::kScale, a, mintnet::scale(value(a), s));
  nodes_.back().scalar = s;
  return n;
}

Node Tape::exp(Node a) {
  return unary(Op::kExp, a, map(value(a), [](double v) { return std::exp(v); }));
}

Node Tape::log(Node a) {
  return unary(Op::kLog, a, map(value(a), [](double v) { return std::log(v); }));
}

Node Tape::square(Node a) {
  return unary(Op::kSquare, a, map(value(a), [](double v) { return v * v; }));
}

Node Tape::activation(Node a, Activation act) {
  Node n = unary(Op::kActivation, a, map(value(a), [act](double v) { return act.h(v); }));
  nodes_.back().act = act;
  return n;
}

Node Tape::activation_grad(Node a, Activation act) {
  Node n = unary(Op::kActivationGrad, a, map(value(a), [act](double v) { return act.dh(v); }));
  nodes_.back().act = act;
  return n;
}

Node Tape::conv2d(Node x, Node w) {
  return binary(Op::kConv2d, x, w, kernels::conv2d_forward(value(x), value(w)));
}

Node Tape::center_diag(Node w, std::size_t channels) {
  const Tensor4& wv = value(w);
  const Shape4& s = wv.shape();
  if (channels == 0 || s.n % channels != 0 || s.c % channels != 0 || s.h != s.w || s.h % 2 == 0) {
    throw ShapeError("center_diag: weight " + s.str() + " is not grouped over " +
                     std::to_string(channels) + " channels");
  }
  const std::size_t go = s.n / channels, gi = s.c / channels, mid = s.h / 2;
  Tensor4 out({go, gi, channels, 1});
  for (std::size_t a = 0; a < go; ++a)
    for (std::size_t b = 0; b < gi; ++b)
      for (std::size_t c = 0; c < channels; ++c)
        out(a, b, c, 0) = wv(a * channels + c, b * channels + c, mid, mid);
  Node n = unary(Op::kCenterDiag, w, std::move(out));
  nodes_.back().count = channels;
  return n;
}

namespace {

void check_group_mix(const Shape4& xs, const Shape4& cs) {
  if (cs.w != 1 || xs.c != cs.c * cs.h) {
    throw ShapeError("group_mix: input " + xs.str() + " incompatible with coefficients " + cs.str());
  }
}

}  // namespace

Node Tape::group_mix(Node x, Node coeff) {
  const Tensor4& xv = value(x);
  const Tensor4& cv = value(coeff);
  const Shape4& xs = xv.shape();
  const Shape4& cs = cv.shape();
  check_group_mix(xs, cs);
  const std::size_t go = cs.n, gi = cs.c, C = cs.h, plane = xs.h * xs.w;
  Tensor4 out({xs.n, go * C, xs.h, xs.w});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t a = 0; a < go; ++a)
      for (std::size_t c = 0; c < C; ++c) {
        double* o = &out(n, a * C + c, 0, 0);
        for (std::size_t b = 0; b < gi; ++b) {
          const double k = cv(a, b, c, 0);
          const double* in = &xv(n, b * C + c, 0, 0);
          for (std::size_t p = 0; p < plane; ++p) o[p] += k * in[p];
        }
      }
  return binary(Op::kGroupMix, x, coeff, std::move(out));
}

Node Tape::reshape(Node a, Shape4 shape) { return unary(Op::kReshape, a, value(a).reshaped(shape)); }

Node Tape::squeeze(Node a, std::size_t k) {
  Node n = unary(Op::kSqueeze, a, mintnet::squeeze(value(a), k));
  nodes_.back().count = k;
  return n;
}

Node Tape::unsqueeze(Node a, std::size_t k) {
  Node n = unary(Op::kUnsqueeze, a, mintnet::unsqueeze(value(a), k));
  nodes_.back().count = k;
  return n;
}

Node Tape::sum(Node a) { return unary(Op::kSum, a, Tensor4::scalar(mintnet::sum(value(a)))); }

Node Tape::sum_per_item(Node a) {
  return unary(Op::kSumPerItem, a, reduce_sum(value(a), {false, true, true, true}));
}

Gradients Tape::backward(Node output) const {
  const Record& out = at(output);
  if (out.value.shape() != Shape4{1, 1, 1, 1}) {
    throw ShapeError("backward needs a scalar output, node " + std::to_string(output.id) +
                     " has shape " + out.value.shape().str());
  }
  std::vector<Tensor4> grads(nodes_.size());
  std::vector<bool> live(nodes_.size(), false);
  grads[output.id] = Tensor4::scalar(1.0);
  live[output.id] = true;

  auto accumulate = [&](Node target, Tensor4 g) {
    const Record& r = nodes_[target.id];
    if (!r.needs_grad) return;
    if (g.shape() != r.value.shape()) g = sum_to(g, r.value.shape());
    if (!live[target.id]) {
      grads[target.id] = std::move(g);
      live[target.id] = true;
    } else {
      Tensor4& acc = grads[target.id];
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
    }
  };

  for (std::size_t id = output.id + 1; id-- > 0;) {
    if (!live[id]) continue;
    const Record& r = nodes_[id];
    if (!r.needs_grad) continue;
    const Tensor4& g = grads[id];
    switch (r.op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kAdd:
        accumulate(r.a, g);
        accumulate(r.b, g);
        break;
      case Op::kSub:
        accumulate(r.a, g);
        accumulate(r.b, mintnet::scale(g, -1.0));
        break;
      case Op::kMul:
        if (nodes_[r.a.id].needs_grad) accumulate(r.a, mintnet::mul(g, nodes_[r.b.id].value));
        if (nodes_[r.b.id].needs_grad) accumulate(r.b, mintnet::mul(g, nodes_[r.a.id].value));
        break;
      case Op::kScale:
        accumulate(r.a, mintnet::scale(g, r.scalar));
        break;
      case Op::kExp:
        accumulate(r.a, mintnet::mul(g, r.value));
        break;
      case Op::kLog:
        accumulate(r.a, mintnet::div(g, nodes_[r.a.id].value));
        break;
      case Op::kSquare: {
        Tensor4 d = mintnet::mul(g, nodes_[r.a.id].value);
        accumulate(r.a, mintnet::scale(d, 2.0));
        break;
      }
      case Op::kActivation: {
        const Activation act = r.act;
        accumulate(r.a, mintnet::mul(g, map(nodes_[r.a.id].value, [act](double u) { return act.dh(u); })));
        break;
      }
      case Op::kActivationGrad: {
        const Activation act = r.act;
        accumulate(r.a, mintnet::mul(g, map(nodes_[r.a.id].value, [act](double u) { return act.d2h(u); })));
        break;
      }
      case Op::kConv2d: {
        const Tensor4& x = nodes_[r.a.id].value;
        const Tensor4& w = nodes_[r.b.id].value;
        if (nodes_[r.a.id].needs_grad) accumulate(r.a, kernels::conv2d_grad_input(g, w));
        if (nodes_[r.b.id].needs_grad) accumulate(r.b, kernels::conv2d_grad_weight(x, g, w.shape().h));
        break;
      }
      case Op::kCenterDiag: {
        const Shape4& ws = nodes_[r.a.id].value.shape();
        const std::size_t C = r.count, mid = ws.h / 2;
        Tensor4 gw(ws);
        const Shape4& gs = g.shape();
        for (std::size_t a = 0; a < gs.n; ++a)
          for (std::size_t b = 0; b < gs.c; ++b)
            for (std::size_t c = 0; c < C; ++c) gw(a * C + c, b * C + c, mid, mid) = g(a, b, c, 0);
        accumulate(r.a, std::move(gw));
        break;
      }
      case Op::kGroupMix: {
        const Tensor4& x = nodes_[r.a.id].value;
        const Tensor4& k = nodes_[r.b.id].value;
        const Shape4& xs = x.shape();
        const Shape4& ks = k.shape();
        const std::size_t go = ks.n, gi = ks.c, C = ks.h, plane = xs.h * xs.w;
        const bool want_x = nodes_[r.a.id].needs_grad;
        const bool want_k = nodes_[r.b.id].needs_grad;
        Tensor4 gx(want_x ? xs : Shape4{});
        Tensor4 gk(want_k ? ks : Shape4{});
        for (std::size_t n = 0; n < xs.n; ++n)
          for (std::size_t a = 0; a < go; ++a)
            for (std::size_t c = 0; c < C; ++c) {
              const double* gp = &g(n, a * C + c, 0, 0);
              for (std::size_t b = 0; b < gi; ++b) {
                const std::size_t off = x.offset(n, b * C + c, 0, 0);
                if (want_x) {
                  const double kv = k(a, b, c, 0);
                  double* dst = &gx[off];
                  for (std::size_t p = 0; p < plane; ++p) dst[p] += kv * gp[p];
                }
                if (want_k) {
                  const double* src = &x[off];
                  double acc = 0.0;
                  for (std::size_t p = 0; p < plane; ++p) acc += gp[p] * src[p];
                  gk(a, b, c, 0) += acc;
                }
              }
            }
        if (want_x) accumulate(r.a, std::move(gx));
        if (want_k) accumulate(r.b, std::move(gk));
        break;
      }
      case Op::kReshape:
        accumulate(r.a, g.reshaped(nodes_[r.a.id].value.shape()));
        break;
      case Op::kSqueeze:
        accumulate(r.a, mintnet::unsqueeze(g, r.count));
        break;
      case Op::kUnsqueeze:
        accumulate(r.a, mintnet::squeeze(g, r.count));
        break;
      case Op::kSum:
        accumulate(r.a, Tensor4(nodes_[r.a.id].value.shape(), g[0]));
        break;
      case Op::kSumPerItem: {
        const Shape4& s = nodes_[r.a.id].value.shape();
        Tensor4 d(s);
        const std::size_t per = s.per_item();
        for (std::size_t n = 0; n < s.n; ++n)
          std::fill_n(d.data().begin() + static_cast<std::ptrdiff_t>(n * per), per, g[n]);
        accumulate(r.a, std::move(d));
        break;
      }
    }
  }

  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].op == Op::kLeaf && !live[id]) grads[id] = Tensor4::zeros(nodes_[id].value.shape());
  }
  return Gradients(std::move(grads));
}

double grad_check(const TapeFunction& f, std::span<const Tensor4> params, double eps) {
  auto evaluate = [&](const std::vector<Tensor4>& ps) {
    Tape tape;
    std::vector<Node> leaves;
    leaves.reserve(ps.size());
    for (const Tensor4& p : ps) leaves.push_back(tape.leaf(p));
    Node out = f(tape, leaves);
    const double v = tape.value(out)[0];
    if (!std::isfinite(v)) throw std::domain_error("grad_check: non-finite function value");
    return v;
  };

  std::vector<Tensor4> ps(params.begin(), params.end());
  Tape tape;
  std::vector<Node> leaves;
  for (const Tensor4& p : ps) leaves.push_back(tape.leaf(p));
  Node out = f(tape, leaves);
  if (!std::isfinite(tape.value(out)[0])) {
    throw std::domain_error("grad_check: non-finite function value");
  }
  const Gradients grads = tape.backward(out);

  double worst = 0.0;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    const Tensor4& analytic = grads.of(leaves[k]);
    for (std::size_t i = 0; i < ps[k].size(); ++i) {
      const double saved = ps[k][i];
      ps[k][i] = saved + eps;
      const double up = evaluate(ps);
      ps[k][i] = saved - eps;
      const double down = evaluate(ps);
      ps[k][i] = saved;
      const double central = (up - down) / (2.0 * eps);
      const double a = analytic[i];
      worst = std::max(worst, std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-8));
    }
  }
  return worst;
}

}  // namespace ad
}  // namespace mintnet
