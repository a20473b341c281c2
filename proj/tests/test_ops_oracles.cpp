// SPDX-License-Identifier: Apache-2.0
//
// Operator value oracles (independent hand computations) and per-operator
// gradient checks against central differences.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "vikdf/gradcheck.hpp"
#include "vikdf/ops.hpp"

using namespace vikdf;
using testutil::random_tensor;

namespace {

// Central-difference check of scalar-valued f over all listed parameters.
void expect_grads_ok(const std::function<Tensor()>& f,
                     const std::vector<std::pair<std::string, Tensor>>& params,
                     double tol = 1e-6) {
  GradCheckResult r = grad_check(f, params);
  INFO("worst ", r.worst_param, "[", r.worst_index, "] analytic=", r.analytic,
       " numeric=", r.numeric);
  CHECK(r.max_rel_err < tol);
}

}  // namespace

TEST_CASE("elementwise operator values") {
  Tensor a = Tensor::from_vector({4}, {1.0, -2.0, 0.0, 3.5});
  Tensor b = Tensor::from_vector({4}, {0.5, 4.0, -1.0, 2.0});
  CHECK(ops::add(a, b).raw()[1] == 2.0);
  CHECK(ops::sub(a, b).raw()[3] == 1.5);
  CHECK(ops::mul(a, b).raw()[1] == -8.0);
  CHECK(ops::scale(a, -2.0).raw()[0] == -2.0);
  CHECK(ops::add_scalar(a, 10.0).raw()[2] == 10.0);
  CHECK(ops::neg(a).raw()[3] == -3.5);
  CHECK(ops::exp_elem(a).raw()[0] == doctest::Approx(std::exp(1.0)));
  Tensor c = ops::clamp(a, -1.0, 2.0);
  CHECK(c.raw()[1] == -1.0);
  CHECK(c.raw()[3] == 2.0);
  CHECK(c.raw()[0] == 1.0);
  // exact GELU: x/2 * (1 + erf(x/sqrt(2)))
  Tensor g = ops::gelu(a);
  for (int i = 0; i < 4; ++i) {
    double x = a.raw()[i];
    CHECK(g.raw()[i] == doctest::Approx(0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)))));
  }
  Tensor s = Tensor::scalar(2.0);
  CHECK(ops::mul_scalar_tensor(a, s).raw()[3] == 7.0);
  CHECK(ops::div_scalar_tensor(a, s).raw()[3] == 1.75);
  CHECK_THROWS_AS(ops::add(a, Tensor::zeros({3})), DimensionError);
}

TEST_CASE("shape operators preserve and rearrange values") {
  // [1, 2, 4] with heads=2 -> [1, 2, 2, 2]: h splits the feature axis.
  Tensor x = Tensor::from_vector({1, 2, 4}, {0, 1, 2, 3, 4, 5, 6, 7});
  Tensor sh = ops::split_heads(x, 2);
  CHECK(sh.shape() == Shape{1, 2, 2, 2});
  // head 0 of position 1 holds features {4, 5}
  CHECK(sh.raw()[2] == 4.0);
  CHECK(sh.raw()[3] == 5.0);
  Tensor back = ops::merge_heads(sh);
  CHECK(testutil::bits_equal(back, x));

  Tensor t = ops::transpose_12(Tensor::from_vector({1, 2, 3}, {0, 1, 2, 3, 4, 5}));
  CHECK(t.shape() == Shape{1, 3, 2});
  CHECK(t.raw()[1] == 3.0);
  CHECK(t.raw()[2] == 1.0);

  Tensor r = ops::reshape(x, {8});
  CHECK(r.rank() == 1);
  CHECK(r.raw()[5] == 5.0);
  CHECK_THROWS_AS(ops::reshape(x, {7}), DimensionError);

  Tensor p1 = Tensor::from_vector({1, 1, 2}, {1, 2});
  Tensor p2 = Tensor::from_vector({1, 2, 2}, {3, 4, 5, 6});
  Tensor cc = ops::concat_dim1({p1, p2});
  CHECK(cc.shape() == Shape{1, 3, 2});
  CHECK(cc.raw()[2] == 3.0);
  Tensor sl = ops::slice_dim1(cc, 1, 2);
  CHECK(testutil::bits_equal(sl, p2));
  CHECK_THROWS_AS(ops::slice_dim1(cc, 2, 2), DimensionError);

  Tensor br = ops::broadcast_rows(Tensor::from_vector({2, 2}, {1, 2, 3, 4}), 3);
  CHECK(br.shape() == Shape{3, 2, 2});
  CHECK(br.raw()[4] == 1.0);

  IdMatrix idx = IdMatrix::zeros(1, 2);
  idx.at(0, 0) = 1;
  idx.at(0, 1) = 0;
  Tensor gr = ops::gather_rows(Tensor::from_vector({1, 2, 2}, {1, 2, 3, 4}), idx);
  CHECK(gr.raw()[0] == 3.0);
  CHECK(gr.raw()[2] == 1.0);
}

TEST_CASE("matmul family matches hand products") {
  // A [2,3] * B [3,2]
  Tensor a = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_vector({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = ops::matmul(a, b);
  CHECK(c.raw()[0] == doctest::Approx(58.0));
  CHECK(c.raw()[1] == doctest::Approx(64.0));
  CHECK(c.raw()[2] == doctest::Approx(139.0));
  CHECK(c.raw()[3] == doctest::Approx(154.0));

  // batched: [2, 1, 2] * [2, 2] shared weight
  Tensor ba = Tensor::from_vector({2, 1, 2}, {1, 2, 3, 4});
  Tensor w = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
  Tensor bc = ops::matmul(ba, w);
  CHECK(bc.shape() == Shape{2, 1, 2});
  CHECK(testutil::bits_equal(bc, ba));

  // nt: [1, 2, 3] x [1, 2, 3] -> [1, 2, 2] of row dot products
  Tensor u = Tensor::from_vector({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor nt = ops::matmul_nt(u, u);
  CHECK(nt.raw()[0] == doctest::Approx(14.0));
  CHECK(nt.raw()[1] == doctest::Approx(32.0));
  CHECK(nt.raw()[2] == doctest::Approx(32.0));
  CHECK(nt.raw()[3] == doctest::Approx(77.0));

  Tensor bias = Tensor::from_vector({2}, {10, 20});
  Tensor lin = ops::linear(ba, w, bias);
  CHECK(lin.raw()[0] == doctest::Approx(11.0));
  CHECK(lin.raw()[3] == doctest::Approx(24.0));
  CHECK(ops::add_bias(ba, bias).raw()[1] == doctest::Approx(22.0));
  CHECK_THROWS_AS(ops::matmul(a, Tensor::zeros({2, 2})), DimensionError);
}

TEST_CASE("layer_norm normalizes the last axis") {
  Tensor x = Tensor::from_vector({1, 2}, {1.0, 3.0});
  Tensor g = Tensor::from_vector({2}, {1.0, 1.0});
  Tensor b = Tensor::from_vector({2}, {0.0, 0.0});
  Tensor y = ops::layer_norm(x, g, b);
  // mean 2, var 1 -> normalized to +-1/sqrt(1 + eps)
  double denom = std::sqrt(1.0 + 1e-5);
  CHECK(y.raw()[0] == doctest::Approx(-1.0 / denom));
  CHECK(y.raw()[1] == doctest::Approx(1.0 / denom));

  Tensor g2 = Tensor::from_vector({2}, {2.0, 2.0});
  Tensor b2 = Tensor::from_vector({2}, {1.0, -1.0});
  Tensor y2 = ops::layer_norm(x, g2, b2);
  CHECK(y2.raw()[0] == doctest::Approx(1.0 - 2.0 / denom));
  CHECK(y2.raw()[1] == doctest::Approx(-1.0 + 2.0 / denom));
}

TEST_CASE("softmax and masked softmax values") {
  Tensor x = Tensor::from_vector({1, 3}, {0.0, 0.0, std::log(2.0)});
  Tensor y = ops::softmax_lastdim(x);
  CHECK(y.raw()[0] == doctest::Approx(0.25));
  CHECK(y.raw()[2] == doctest::Approx(0.5));

  // causal: [1, 1, 2, 2] query row 0 sees only key 0
  Tensor att = Tensor::from_vector({1, 1, 2, 2}, {5.0, 9.0, 1.0, 1.0});
  Tensor cz = ops::masked_softmax(att, nullptr, 0);
  CHECK(cz.raw()[0] == 1.0);
  CHECK(cz.raw()[1] == 0.0);  // masked weights are exactly zero
  CHECK(cz.raw()[2] == doctest::Approx(0.5));

  // key mask: column 1 invalid
  BoolMask km = BoolMask::full({1, 2}, true);
  km.v[1] = 0;
  Tensor mz = ops::masked_softmax(att, &km, -1);
  CHECK(mz.raw()[0] == 1.0);
  CHECK(mz.raw()[1] == 0.0);
  CHECK(mz.raw()[2] == 1.0);

  // a fully-masked key set is degenerate...
  BoolMask none = BoolMask::full({1, 2}, false);
  CHECK_THROWS_AS(ops::masked_softmax(att, &none, -1), DegenerateMaskError);
  // ...unless the query may attach to itself
  Tensor self = ops::masked_softmax(att, &none, -1, true);
  CHECK(self.raw()[0] == 1.0);
  CHECK(self.raw()[1] == 0.0);
  CHECK(self.raw()[3] == 1.0);

  BoolMask fm = BoolMask::full({1, 2, 2}, true);
  fm.v[1] = 0;
  Tensor fz = ops::masked_softmax_full(att, fm);
  CHECK(fz.raw()[0] == 1.0);
  CHECK(fz.raw()[1] == 0.0);
}

TEST_CASE("attention matches a by-hand computation") {
  // one head, one query, two keys, dh=1: softmax(q.k/sqrt(1)) weights over v
  Tensor q = Tensor::from_vector({1, 1, 1, 1}, {1.0});
  Tensor k = Tensor::from_vector({1, 1, 2, 1}, {0.0, std::log(3.0)});
  Tensor v = Tensor::from_vector({1, 1, 2, 1}, {10.0, 20.0});
  Tensor out = ops::scaled_dot_product_attention(q, k, v, nullptr);
  double w1 = 3.0 / 4.0;  // exp(log 3)/(1 + exp(log 3))
  CHECK(out.raw()[0] == doctest::Approx(10.0 * (1.0 - w1) + 20.0 * w1));
}

TEST_CASE("embedding gathers table rows") {
  Tensor table = Tensor::from_vector({3, 2}, {0, 1, 10, 11, 20, 21});
  IdMatrix ids = IdMatrix::zeros(1, 2);
  ids.at(0, 0) = 2;
  ids.at(0, 1) = 0;
  Tensor e = ops::embedding(table, ids);
  CHECK(e.shape() == Shape{1, 2, 2});
  CHECK(e.raw()[0] == 20.0);
  CHECK(e.raw()[3] == 1.0);
  ids.at(0, 1) = 3;
  CHECK_THROWS_AS(ops::embedding(table, ids), InputError);
}

TEST_CASE("reductions and normalization") {
  Tensor x = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  CHECK(ops::sum_all(x).item() == doctest::Approx(10.0));
  CHECK(ops::mean_all(x).item() == doctest::Approx(2.5));
  Tensor m = ops::mean_dim1(Tensor::from_vector({1, 2, 2}, {1, 2, 3, 4}));
  CHECK(m.shape() == Shape{1, 2});
  CHECK(m.raw()[0] == doctest::Approx(2.0));
  CHECK(m.raw()[1] == doctest::Approx(3.0));

  Tensor n = ops::l2_normalize_lastdim(Tensor::from_vector({1, 2}, {3.0, 4.0}));
  CHECK(n.raw()[0] == doctest::Approx(0.6));
  CHECK(n.raw()[1] == doctest::Approx(0.8));
  CHECK_THROWS_AS(ops::l2_normalize_lastdim(Tensor::zeros({1, 2})), NumericError);
}

TEST_CASE("pixel shuffle round-trips and rearranges correctly") {
  // [1, 4, 1, 1] with r=2 -> [1, 1, 2, 2] laying out the 4 channels
  Tensor x = Tensor::from_vector({1, 4, 1, 1}, {1, 2, 3, 4});
  Tensor y = ops::pixel_shuffle(x, 2);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.raw()[0] == 1.0);
  CHECK(y.raw()[1] == 2.0);
  CHECK(y.raw()[2] == 3.0);
  CHECK(y.raw()[3] == 4.0);
  CHECK(testutil::bits_equal(ops::pixel_unshuffle(y, 2), x));

  Rng rng(3);
  Tensor big = random_tensor(rng, {2, 8, 3, 3});
  CHECK(testutil::bits_equal(ops::pixel_unshuffle(ops::pixel_shuffle(big, 2), 2), big));
}

TEST_CASE("conv2d matches a naive sliding window") {
  Rng rng(4);
  Tensor x = random_tensor(rng, {2, 3, 5, 5});
  Tensor w = random_tensor(rng, {4, 3, 3, 3});
  Tensor b = random_tensor(rng, {4});
  std::int64_t stride = 2, pad = 1;
  Tensor y = ops::conv2d(x, w, b, stride, pad);
  std::int64_t ho = (5 + 2 * pad - 3) / stride + 1;
  REQUIRE(y.shape() == Shape{2, 4, ho, ho});
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t co = 0; co < 4; ++co)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < ho; ++ox) {
          double acc = b.raw()[co];
          for (std::int64_t ci = 0; ci < 3; ++ci)
            for (std::int64_t ky = 0; ky < 3; ++ky)
              for (std::int64_t kx = 0; kx < 3; ++kx) {
                std::int64_t iy = oy * stride + ky - pad;
                std::int64_t ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
                acc += x.raw()[((n * 3 + ci) * 5 + iy) * 5 + ix] *
                       w.raw()[((co * 3 + ci) * 3 + ky) * 3 + kx];
              }
          CHECK(y.raw()[((n * 4 + co) * ho + oy) * ho + ox] == doctest::Approx(acc));
        }
}

TEST_CASE("loss operator closed forms") {
  // 1x1 InfoNCE is exactly zero
  CHECK(ops::info_nce_sym(Tensor::from_vector({1, 1}, {3.7})).item() == doctest::Approx(0.0));
  // 2x2 all-equal logits: 4 * ln 2
  CHECK(ops::info_nce_sym(Tensor::full({2, 2}, 0.25)).item() ==
        doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(ops::info_nce_sym(Tensor::zeros({2, 3})), DimensionError);

  Tensor p = Tensor::from_vector({2}, {1.0, 5.0});
  Tensor t = Tensor::from_vector({2}, {2.0, 1.0});
  BoolMask all2 = BoolMask::full({2}, true);
  CHECK(ops::masked_mae(p, t, all2).item() == doctest::Approx(2.5));
  BoolMask one2 = BoolMask::full({2}, true);
  one2.v[1] = 0;
  CHECK(ops::masked_mae(p, t, one2).item() == doctest::Approx(1.0));
  CHECK_THROWS_AS(ops::masked_mae(p, t, BoolMask::full({2}, false)), DegenerateMaskError);

  // uniform logits cross entropy = ln V
  Tensor lg = Tensor::zeros({1, 2, 5});
  IdMatrix tg = IdMatrix::zeros(1, 2);
  BoolMask tm = BoolMask::full({1, 2}, true);
  CHECK(ops::masked_cross_entropy(lg, tg, tm).item() ==
        doctest::Approx(std::log(5.0)).epsilon(1e-12));

  CHECK(ops::mse_mean(p, t).item() == doctest::Approx((1.0 + 16.0) / 2.0));
  CHECK(ops::mse_mean(p, p).item() == 0.0);
}

TEST_CASE("operator gradients agree with central differences") {
  Rng rng(99);

  SUBCASE("linear + gelu + layer_norm chain") {
    Tensor x = random_tensor(rng, {2, 3, 4}, 0.7, true);
    Tensor w = random_tensor(rng, {4, 4}, 0.5, true);
    Tensor b = random_tensor(rng, {4}, 0.3, true);
    Tensor g = random_tensor(rng, {4}, 0.2, true);
    Tensor bb = random_tensor(rng, {4}, 0.2, true);
    expect_grads_ok(
        [&] {
          return ops::mean_all(ops::layer_norm(ops::gelu(ops::linear(x, w, b)), g, bb));
        },
        {{"x", x}, {"w", w}, {"b", b}, {"g", g}, {"bb", bb}});
  }

  SUBCASE("matmul_nt and softmax") {
    Tensor a = random_tensor(rng, {1, 3, 4}, 0.6, true);
    Tensor b = random_tensor(rng, {1, 3, 4}, 0.6, true);
    expect_grads_ok([&] { return ops::mean_all(ops::softmax_lastdim(ops::matmul_nt(a, b))); },
                    {{"a", a}, {"b", b}});
  }

  SUBCASE("masked softmax with causal offset and key mask") {
    Tensor x = random_tensor(rng, {2, 2, 3, 3}, 0.8, true);
    BoolMask km = BoolMask::full({2, 3}, true);
    km.v[2] = 0;
    expect_grads_ok([&] { return ops::mean_all(ops::masked_softmax(x, &km, 0, true)); },
                    {{"x", x}});
  }

  SUBCASE("full attention path") {
    Tensor q = random_tensor(rng, {1, 2, 2, 3}, 0.7, true);
    Tensor k = random_tensor(rng, {1, 2, 4, 3}, 0.7, true);
    Tensor v = random_tensor(rng, {1, 2, 4, 3}, 0.7, true);
    BoolMask km = BoolMask::full({1, 4}, true);
    km.v[3] = 0;
    expect_grads_ok(
        [&] { return ops::mean_all(ops::attention_masked(q, k, v, &km, -1, false)); },
        {{"q", q}, {"k", k}, {"v", v}});
  }

  SUBCASE("conv2d and pixel_shuffle") {
    Tensor x = random_tensor(rng, {1, 2, 4, 4}, 0.5, true);
    Tensor w = random_tensor(rng, {8, 2, 3, 3}, 0.4, true);
    Tensor b = random_tensor(rng, {8}, 0.3, true);
    expect_grads_ok(
        [&] { return ops::mean_all(ops::pixel_shuffle(ops::conv2d(x, w, b, 1, 1), 2)); },
        {{"x", x}, {"w", w}, {"b", b}});
  }

  SUBCASE("embedding and gather") {
    Tensor table = random_tensor(rng, {5, 3}, 0.6, true);
    IdMatrix ids = IdMatrix::zeros(2, 3);
    for (std::size_t i = 0; i < ids.v.size(); ++i)
      ids.v[i] = static_cast<std::int32_t>(i % 5);
    IdMatrix sel = IdMatrix::zeros(2, 2);
    sel.at(0, 0) = 2;
    sel.at(1, 1) = 1;
    expect_grads_ok(
        [&] { return ops::mean_all(ops::gather_rows(ops::embedding(table, ids), sel)); },
        {{"table", table}});
  }

  SUBCASE("l2 normalize and mean_dim1") {
    Tensor x = random_tensor(rng, {2, 3, 4}, 1.0, true);
    expect_grads_ok(
        [&] { return ops::mean_all(ops::l2_normalize_lastdim(ops::mean_dim1(x))); },
        {{"x", x}});
  }

  SUBCASE("losses") {
    Tensor lgt = random_tensor(rng, {3, 3}, 0.9, true);
    expect_grads_ok([&] { return ops::info_nce_sym(lgt); }, {{"lgt", lgt}});

    Tensor pred = random_tensor(rng, {2, 4}, 1.0, true);
    Tensor tgt = random_tensor(rng, {2, 4}, 1.0);
    BoolMask mm = BoolMask::full({2, 4}, true);
    mm.v[1] = 0;
    expect_grads_ok([&] { return ops::masked_mae(pred, tgt, mm); }, {{"pred", pred}});
    expect_grads_ok([&] { return ops::mse_mean(pred, tgt); }, {{"pred", pred}});

    Tensor lg3 = random_tensor(rng, {2, 3, 5}, 0.8, true);
    IdMatrix tg = IdMatrix::zeros(2, 3);
    for (std::size_t i = 0; i < tg.v.size(); ++i) tg.v[i] = static_cast<std::int32_t>(i % 5);
    BoolMask tm = BoolMask::full({2, 3}, true);
    tm.v[4] = 0;
    expect_grads_ok([&] { return ops::masked_cross_entropy(lg3, tg, tm); }, {{"lg3", lg3}});
  }

  SUBCASE("shape plumbing") {
    Tensor x = random_tensor(rng, {2, 3, 4}, 0.8, true);
    Tensor y = random_tensor(rng, {2, 2, 4}, 0.8, true);
    expect_grads_ok(
        [&] {
          Tensor cat = ops::concat_dim1({x, y});
          Tensor sl = ops::slice_dim1(cat, 1, 3);
          Tensor tr = ops::transpose_12(sl);
          return ops::mean_all(ops::reshape(tr, {2, 12}));
        },
        {{"x", x}, {"y", y}});

    Tensor base = random_tensor(rng, {2, 4}, 0.8, true);
    expect_grads_ok(
        [&] {
          Tensor br = ops::broadcast_rows(base, 3);
          return ops::mean_all(ops::merge_heads(ops::split_heads(br, 2)));
        },
        {{"base", base}});
  }

  SUBCASE("scalar tensor arithmetic") {
    Tensor x = random_tensor(rng, {3}, 0.9, true);
    Tensor s = Tensor::scalar(0.7, true);
    expect_grads_ok(
        [&] {
          Tensor a = ops::mul_scalar_tensor(x, s);
          Tensor d = ops::div_scalar_tensor(a, ops::add_scalar(ops::exp_elem(s), 1.0));
          return ops::sum_all(ops::mul(d, d));
        },
        {{"x", x}, {"s", s}});
  }

  SUBCASE("clamp passes gradient only inside the active range") {
    Tensor x = Tensor::from_vector({3}, {-2.0, 0.2, 2.0});
    x.set_requires_grad(true);
    Tensor y = ops::sum_all(ops::clamp(x, -1.0, 1.0));
    y.backward();
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
    CHECK(x.grad()[2] == 0.0);
  }
}
