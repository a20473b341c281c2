// SPDX-License-Identifier: Apache-2.0
//
// Tensor container semantics, the error taxonomy, and reverse-mode
// differentiation on small hand-checked graphs.

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "vikdf/ops.hpp"
#include "vikdf/tensor.hpp"

using namespace vikdf;

TEST_CASE("error categories are stable strings") {
  CHECK(DimensionError("x").category() == "dimension");
  CHECK(InputError("x").category() == "input");
  CHECK(DegenerateMaskError("x").category() == "degenerate-mask");
  CHECK(NumericError("x").category() == "numeric");
  CHECK(ContractError("x").category() == "contract");
  CHECK(ParseError("x").category() == "parse");
  CHECK(IoError("x").category() == "io");
  CHECK(VersionError("x").category() == "version");
  CHECK(IntegrityError("x").category() == "integrity");
  CHECK(TruncationError("x").category() == "truncation");
  CHECK(UsageError("x").category() == "usage");
  CHECK(std::string(DimensionError("boom").what()) == "boom");
}

TEST_CASE("tensor constructors fill and shape correctly") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.rank() == 2);
  CHECK(z.numel() == 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(z.raw()[i] == 0.0);

  Tensor f = Tensor::full({4}, -2.5);
  for (std::size_t i = 0; i < 4; ++i) CHECK(f.raw()[i] == -2.5);

  Tensor v = Tensor::from_vector({2, 2}, {1.0, 2.0, 3.0, 4.0});
  CHECK(v.dim(0) == 2);
  CHECK(v.raw()[3] == 4.0);

  Tensor s = Tensor::scalar(7.0);
  CHECK(s.item() == 7.0);
  CHECK_THROWS_AS(v.item(), DimensionError);
  CHECK_THROWS_AS(Tensor::from_vector({2, 2}, {1.0}), DimensionError);
}

TEST_CASE("backward computes product-rule gradients and accumulates reuse") {
  // y = sum(x * x): dy/dx = 2x, with x consumed twice by the same node.
  Tensor x = Tensor::from_vector({3}, {1.0, -2.0, 0.5});
  x.set_requires_grad(true);
  Tensor y = ops::sum_all(ops::mul(x, x));
  CHECK(y.item() == doctest::Approx(1.0 + 4.0 + 0.25));
  y.backward();
  REQUIRE(x.has_grad());
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(-4.0));
  CHECK(x.grad()[2] == doctest::Approx(1.0));
}

TEST_CASE("gradients accumulate across separate uses of one tensor") {
  // y = sum(a + a) + sum(a): dy/da = 3 per element.
  Tensor a = Tensor::from_vector({2}, {0.3, 0.7});
  a.set_requires_grad(true);
  Tensor y = ops::add(ops::sum_all(ops::add(a, a)), ops::sum_all(a));
  y.backward();
  CHECK(a.grad()[0] == doctest::Approx(3.0));
  CHECK(a.grad()[1] == doctest::Approx(3.0));
}

TEST_CASE("zero_grad clears and backward restarts cleanly") {
  Tensor a = Tensor::from_vector({2}, {1.0, 2.0});
  a.set_requires_grad(true);
  ops::sum_all(a).backward();
  CHECK(a.grad()[0] == doctest::Approx(1.0));
  a.zero_grad();
  CHECK_FALSE(a.has_grad());
  ops::sum_all(ops::scale(a, 4.0)).backward();
  CHECK(a.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("detach blocks the gradient path") {
  Tensor a = Tensor::from_vector({2}, {1.0, 2.0});
  a.set_requires_grad(true);
  Tensor d = ops::scale(a, 2.0).detach();
  CHECK_FALSE(d.requires_grad());
  CHECK(d.raw()[1] == 4.0);
  Tensor y = ops::sum_all(ops::add(ops::mul(a, d), a));
  y.backward();
  // d is a constant: dy/da = d + 1, with no second-order contribution.
  CHECK(a.grad()[0] == doctest::Approx(3.0));
  CHECK(a.grad()[1] == doctest::Approx(5.0));
}

TEST_CASE("backward handles deep chains without recursion issues") {
  Tensor x = Tensor::scalar(1.0);
  x.set_requires_grad(true);
  Tensor y = x;
  for (int i = 0; i < 20000; ++i) y = ops::add_scalar(y, 1e-6);
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("backward on a shared diamond graph sums both paths") {
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  Tensor p = ops::scale(x, 2.0);   // 2x
  Tensor q = ops::mul(p, p);       // 4x^2
  Tensor y = ops::add(q, p);       // 4x^2 + 2x, dy/dx = 8x + 2
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(26.0));
}

TEST_CASE("bool masks and id matrices hold and index values") {
  BoolMask m = BoolMask::full({2, 3}, true);
  CHECK(m.numel() == 6);
  m.v[4] = 0;
  CHECK(m.at(4) == false);
  CHECK(m.at(2) == true);

  IdMatrix ids = IdMatrix::zeros(2, 2);
  ids.at(1, 0) = 42;
  CHECK(ids.v[2] == 42);
  CHECK(ids.rows == 2);
  CHECK(ids.cols == 2);
}
