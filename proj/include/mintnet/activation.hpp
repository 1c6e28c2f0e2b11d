#pragma once

#include <cmath>
#include <string>

namespace mintnet {

// Monotone activation with its first and second derivatives. h' >= 0 holds
// for every kind, which the Mint layer's positivity argument relies on.
class Activation {
 public:
  enum class Kind { kElu, kTanh };

  constexpr Activation() = default;
  constexpr explicit Activation(Kind kind) : kind_(kind) {}

  static Activation from_name(const std::string& name);

  Kind kind() const { return kind_; }
  std::string name() const;

  double h(double u) const {
    if (kind_ == Kind::kElu) return u > 0.0 ? u : std::expm1(u);
    return std::tanh(u);
  }
  double dh(double u) const {
    if (kind_ == Kind::kElu) return u > 0.0 ? 1.0 : std::exp(u);
    const double t = std::tanh(u);
    return 1.0 - t * t;
  }
  // ELU's h'' jumps at 0 and takes its left limit there.
  double d2h(double u) const {
    if (kind_ == Kind::kElu) return u > 0.0 ? 0.0 : std::exp(u);
    const double t = std::tanh(u);
    return -2.0 * t * (1.0 - t * t);
  }

  bool operator==(const Activation&) const = default;

 private:
  Kind kind_ = Kind::kElu;
};

}  // namespace mintnet
