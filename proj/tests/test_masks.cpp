#include <doctest.h>

#include <random>

#include "mintnet/errors.hpp"
#include "mintnet/masks.hpp"
#include "support/oracles.hpp"

using namespace mintnet;

namespace {

std::vector<double> slab(const Mask& m, std::size_t o, std::size_t i) {
  std::vector<double> out;
  for (std::size_t y = 0; y < m.shape().h; ++y)
    for (std::size_t x = 0; x < m.shape().w; ++x) out.push_back(m(o, i, y, x));
  return out;
}

bool triangular_by_dense(const Tensor4& w, const Mask& m, Orientation o, std::size_t h, std::size_t wd) {
  const oracle::Matrix a = oracle::conv_matrix(mul(w, m), h, wd);
  return oracle::max_off_triangle(a, o == Orientation::kLower) == 0.0;
}

}  // namespace

TEST_CASE("single-channel 3x3 masks") {
  const std::vector<double> lower = {1, 1, 1, 1, 1, 0, 0, 0, 0};
  const std::vector<double> upper = {0, 0, 0, 0, 1, 1, 1, 1, 1};
  CHECK(slab(base_mask(1, 3, Orientation::kLower), 0, 0) == lower);
  CHECK(slab(base_mask(1, 3, Orientation::kUpper), 0, 0) == upper);
}

TEST_CASE("1x1 masks are triangular channel matrices") {
  const Mask m = base_mask(2, 1, Orientation::kLower);
  CHECK(m(0, 0, 0, 0) == 1.0);
  CHECK(m(0, 1, 0, 0) == 0.0);
  CHECK(m(1, 0, 0, 0) == 1.0);
  CHECK(m(1, 1, 0, 0) == 1.0);
}

TEST_CASE("grouped masks tile the base mask") {
  for (Orientation o : {Orientation::kLower, Orientation::kUpper}) {
    const Mask base = base_mask(3, 3, o);
    CHECK(grouped_mask(3, 1, 1, 3, o) == base);
    const Mask m1 = grouped_mask(3, 2, 1, 3, o);
    CHECK(m1.shape() == Shape4{6, 3, 3, 3});
    const Mask g = grouped_mask(3, 2, 3, 3, o);
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t i = 0; i < 3; ++i)
          for (std::size_t j = 0; j < 3; ++j) CHECK(slab(g, a * 3 + i, b * 3 + j) == slab(base, i, j));
  }
  const Mask g = grouped_mask(1, 2, 2, 3, Orientation::kLower);
  const std::vector<double> lower = {1, 1, 1, 1, 1, 0, 0, 0, 0};
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 2; ++b) CHECK(slab(g, a, b) == lower);
}

TEST_CASE("upper mask is the point reflection of lower") {
  const Mask lo = base_mask(3, 5, Orientation::kLower);
  const Mask up = base_mask(3, 5, Orientation::kUpper);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t m = 0; m < 5; ++m)
        for (std::size_t n = 0; n < 5; ++n) CHECK(up(i, j, m, n) == lo(2 - i, 2 - j, 4 - m, 4 - n));
}

TEST_CASE("mask construction rejects bad arguments") {
  CHECK_THROWS_AS(base_mask(2, 2, Orientation::kLower), ShapeError);
  CHECK_THROWS_AS(base_mask(0, 3, Orientation::kLower), ShapeError);
  CHECK_THROWS_AS(grouped_mask(2, 0, 1, 3, Orientation::kLower), ShapeError);
  CHECK(orientation_from_string(to_string(Orientation::kUpper)) == Orientation::kUpper);
  CHECK_THROWS(orientation_from_string("diagonal"));
}

TEST_CASE("triangularity oracle") {
  std::mt19937_64 rng(13);
  SUBCASE("masked random weights are triangular in both orientations") {
    for (std::size_t c = 1; c <= 3; ++c)
      for (std::size_t r : {1u, 3u})
        for (std::size_t hw = 1; hw <= 4; ++hw)
          for (Orientation o : {Orientation::kLower, Orientation::kUpper}) {
            const Mask m = base_mask(c, r, o);
            const ConvWeight w(oracle::random_tensor({c, c, r, r}, rng));
            CHECK(triangularity_oracle(w, m, o, hw, hw));
            CHECK(triangular_by_dense(w.tensor(), m, o, hw, hw));
          }
  }
  SUBCASE("unmasked weights are not") {
    const ConvWeight w(oracle::random_tensor({2, 2, 3, 3}, rng));
    const Mask ones = Mask::ones({2, 2, 3, 3});
    CHECK_FALSE(triangularity_oracle(w, ones, Orientation::kLower, 4, 4));
    CHECK_FALSE(triangularity_oracle(w, ones, Orientation::kUpper, 4, 4));
  }
  SUBCASE("zero weights are") {
    const ConvWeight w(2, 2, 3);
    CHECK(triangularity_oracle(w, Mask::ones({2, 2, 3, 3}), Orientation::kLower, 4, 4));
  }
  SUBCASE("library dense operator matches the test oracle") {
    const Tensor4 w = oracle::random_tensor({2, 2, 3, 3}, rng);
    const DenseOperator d = dense_conv_operator(w, 3, 4);
    const oracle::Matrix ref = oracle::conv_matrix(w, 3, 4);
    REQUIRE(d.rows == ref.rows);
    REQUIRE(d.cols == ref.cols);
    CHECK(d.a == ref.a);
  }
}
