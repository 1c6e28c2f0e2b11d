#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mintnet/activation.hpp"
#include "mintnet/tensor.hpp"

namespace mintnet::ad {

// Handle to a value recorded on a Tape.
struct Node {
  std::size_t id = 0;
  bool operator==(const Node&) const = default;
};

class UnknownNodeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

enum class Op {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kExp,
  kLog,
  kSquare,
  kActivation,
  kActivationGrad,
  kConv2d,
  kCenterDiag,
  kGroupMix,
  kReshape,
  kSqueeze,
  kUnsqueeze,
  kSum,
  kSumPerItem,
};

// Gradients of one scalar with respect to every leaf on a tape.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor4> by_node) : by_node_(std::move(by_node)) {}
  // Gradient with respect to `leaf`; zeros when the output does not depend on it.
  const Tensor4& of(Node leaf) const;

 private:
  std::vector<Tensor4> by_node_;
};

// Eager reverse-mode tape. Every op computes its value immediately and
// appends a node; backward() walks the nodes once in reverse order.
//
// Binary elementwise ops broadcast: each axis must match or be 1.
class Tape {
 public:
  Tape() = default;

  // Differentiable input.
  Node leaf(Tensor4 value);
  // Input that never receives a gradient.
  Node constant(Tensor4 value);

  const Tensor4& value(Node node) const;
  std::size_t size() const { return nodes_.size(); }
  Op op(Node node) const;

  Node add(Node a, Node b);
  Node sub(Node a, Node b);
  Node mul(Node a, Node b);
  Node scale(Node a, double s);
  Node exp(Node a);
  Node log(Node a);
  Node square(Node a);
  Node activation(Node a, Activation act);
  // h'(a); its backward uses h''.
  Node activation_grad(Node a, Activation act);
  // Same-shape convolution of x (n, c_in, h, w) by w (c_out, c_in, r, r).
  Node conv2d(Node x, Node w);
  // Same-channel center taps of a grouped weight (g_out*C, g_in*C, r, r),
  // returned as (g_out, g_in, C, 1).
  Node center_diag(Node w, std::size_t channels);
  // x (n, g_in*C, h, w) mixed by coeff (g_out, g_in, C, 1):
  // out[a*C + c] = sum_b coeff[a, b, c] * x[b*C + c].
  Node group_mix(Node x, Node coeff);
  Node reshape(Node a, Shape4 shape);
  Node squeeze(Node a, std::size_t k);
  Node unsqueeze(Node a, std::size_t k);
  // Sum of every entry, as a (1,1,1,1) tensor.
  Node sum(Node a);
  // Per batch entry sums, as (n,1,1,1).
  Node sum_per_item(Node a);

  // Reverse sweep from a (1,1,1,1) output.
  Gradients backward(Node output) const;

 private:
  struct Record {
    Op op;
    Node a;
    Node b;
    Tensor4 value;
    bool needs_grad = false;
    double scalar = 0.0;
    std::size_t count = 0;
    Activation act;
  };

  const Record& at(Node node) const;
  Node push(Record r);
  Node unary(Op op, Node a, Tensor4 value);
  Node binary(Op op, Node a, Node b, Tensor4 value);

  std::vector<Record> nodes_;
};

// Builds a scalar on a fresh tape from leaves holding `params`.
using TapeFunction = std::function<Node(Tape&, std::span<const Node>)>;

// Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-8),
// where central is the central difference with step eps. Throws
// std::domain_error if any evaluation is non-finite.
double grad_check(const TapeFunction& f, std::span<const Tensor4> params, double eps = 1e-5);

}  // namespace mintnet::ad
