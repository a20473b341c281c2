// SPDX-License-Identifier: Apache-2.0
//
// Stage-1 objectives: closed-form values, masking behavior, and the
// similarity-pooling variants.

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "vikdf/distillation.hpp"

using namespace vikdf;

namespace {

KnowledgeVectors kv(Tensor t, KnowledgeSource src) { return KnowledgeVectors{t, src}; }

}  // namespace

TEST_CASE("pooled_normalized averages queries onto the unit sphere") {
  // two queries [3,0] and [1,0]: mean [2,0] -> unit [1,0]
  Tensor k = Tensor::from_vector({1, 2, 2}, {3.0, 0.0, 1.0, 0.0});
  Tensor p = pooled_normalized(k);
  CHECK(p.shape() == Shape{1, 2});
  CHECK(p.raw()[0] == doctest::Approx(1.0));
  CHECK(p.raw()[1] == doctest::Approx(0.0));
}

TEST_CASE("pairwise_max_cos scores the best query pair and routes gradient there") {
  // batch a: one row with two unit queries along x and y
  Tensor a = Tensor::from_vector({1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
  a.set_requires_grad(true);
  // batch b: one row with a single-direction pair; best match is x . x = 1
  Tensor b = Tensor::from_vector({1, 2, 2}, {1.0, 0.0, -1.0, 0.0});
  b.set_requires_grad(true);
  Tensor s = pairwise_max_cos(a, b);
  CHECK(s.shape() == Shape{1, 1});
  CHECK(s.raw()[0] == doctest::Approx(1.0));
  s.backward();
  // winner is (a query 0, b query 0): all other rows get zero gradient
  CHECK(a.grad()[0] == doctest::Approx(1.0));
  CHECK(a.grad()[1] == doctest::Approx(0.0));
  CHECK(a.grad()[2] == 0.0);
  CHECK(a.grad()[3] == 0.0);
  CHECK(b.grad()[0] == doctest::Approx(1.0));
  CHECK(b.grad()[2] == 0.0);
}

TEST_CASE("matching loss closed forms") {
  ParamRegistry reg;
  Temperature temp(reg, 0.07);

  SUBCASE("a single pair scores zero") {
    Rng rng(5);
    Tensor kt = testutil::random_tensor(rng, {1, 2, 4}, 1.0);
    Tensor ki = testutil::random_tensor(rng, {1, 2, 4}, 1.0);
    Tensor l = loss_tim(kv(kt, KnowledgeSource::FromText), kv(ki, KnowledgeSource::FromImage),
                        temp, "mean");
    CHECK(std::abs(l.item()) <= 1e-9);
  }

  SUBCASE("two identical pooled rows score 4 ln 2") {
    Tensor kt = Tensor::full({2, 2, 4}, 0.5);
    Tensor ki = Tensor::full({2, 2, 4}, 0.25);
    Tensor l = loss_tim(kv(kt, KnowledgeSource::FromText), kv(ki, KnowledgeSource::FromImage),
                        temp, "mean");
    CHECK(l.item() == doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-12));
    Tensor lmax = loss_tim(kv(kt, KnowledgeSource::FromText),
                           kv(ki, KnowledgeSource::FromImage), temp, "max_pairwise");
    CHECK(lmax.item() == doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-12));
  }

  SUBCASE("argument order does not change the value") {
    Rng rng(6);
    Tensor kt = testutil::random_tensor(rng, {3, 2, 4}, 1.0);
    Tensor ki = testutil::random_tensor(rng, {3, 2, 4}, 1.0);
    Tensor l1 = loss_tim(kv(kt, KnowledgeSource::FromText), kv(ki, KnowledgeSource::FromImage),
                         temp, "mean");
    Tensor l2 = loss_tim(kv(ki, KnowledgeSource::FromImage), kv(kt, KnowledgeSource::FromText),
                         temp, "mean");
    CHECK(l1.item() == doctest::Approx(l2.item()).epsilon(1e-12));
  }

  SUBCASE("mismatched sources are a contract error") {
    Tensor k = Tensor::full({2, 2, 4}, 0.5);
    CHECK_THROWS_AS(loss_tim(kv(k, KnowledgeSource::FromImage),
                             kv(k, KnowledgeSource::FromImage), temp, "mean"),
                    ContractError);
    CHECK_THROWS_AS(loss_tim(kv(k, KnowledgeSource::FromText),
                             kv(k, KnowledgeSource::Reconstructed), temp, "mean"),
                    ContractError);
  }

  SUBCASE("batch sizes must agree") {
    Tensor k2 = Tensor::full({2, 2, 4}, 0.5);
    Tensor k3 = Tensor::full({3, 2, 4}, 0.5);
    CHECK_THROWS_AS(loss_tim(kv(k2, KnowledgeSource::FromText),
                             kv(k3, KnowledgeSource::FromImage), temp, "mean"),
                    DimensionError);
  }

  SUBCASE("gradient reaches the temperature") {
    Rng rng(7);
    Tensor kt = testutil::random_tensor(rng, {3, 2, 4}, 1.0, true);
    Tensor ki = testutil::random_tensor(rng, {3, 2, 4}, 1.0, true);
    Tensor l = loss_tim(kv(kt, KnowledgeSource::FromText), kv(ki, KnowledgeSource::FromImage),
                        temp, "mean");
    l.backward();
    const auto* e = reg.find("temperature.log_tau");
    REQUIRE(e != nullptr);
    REQUIRE(e->tensor.has_grad());
    CHECK(e->tensor.grad()[0] != 0.0);
    CHECK(kt.has_grad());
    CHECK(ki.has_grad());
  }
}

TEST_CASE("masked image reconstruction loss") {
  std::int64_t S = 8, p = 4;
  Tensor target = Tensor::full({1, 3, S, S}, 0.5);

  SUBCASE("perfect prediction scores exactly zero") {
    BoolMask mask = BoolMask::full({1, 4}, true);
    CHECK(loss_tamim(target, target, mask, p).item() == 0.0);
  }

  SUBCASE("only masked patches contribute") {
    BoolMask mask = BoolMask::full({1, 4}, false);
    mask.v[0] = 1;  // top-left patch
    Tensor pred = Tensor::full({1, 3, S, S}, 0.5);
    // corrupt an unmasked patch: loss stays zero
    pred.raw()[(0 * S + 0) * S + 7] = 9.0;  // top-right patch, channel 0
    CHECK(loss_tamim(pred, target, mask, p).item() == 0.0);
    // corrupt one masked pixel by 0.3: mean |err| over 3*4*4 pixels
    pred.raw()[(0 * S + 1) * S + 2] = 0.8;
    CHECK(loss_tamim(pred, target, mask, p).item() ==
          doctest::Approx(0.3 / (3.0 * 16.0)).epsilon(1e-12));
  }

  SUBCASE("an empty mask is degenerate") {
    BoolMask mask = BoolMask::full({1, 4}, false);
    CHECK_THROWS_AS(loss_tamim(target, target, mask, p), DegenerateMaskError);
  }
}

TEST_CASE("masked token prediction loss") {
  std::int64_t V = tok::kVocabSize;

  SUBCASE("uniform logits score ln V") {
    Tensor logits = Tensor::zeros({2, 3, V});
    IdMatrix targets = IdMatrix::zeros(2, 3);
    targets.at(0, 1) = 'x';
    BoolMask mask = BoolMask::full({2, 3}, false);
    mask.v[1] = 1;
    mask.v[5] = 1;
    CHECK(loss_iamtm(logits, targets, mask).item() ==
          doctest::Approx(std::log(static_cast<double>(V))).epsilon(1e-12));
  }

  SUBCASE("confident correct prediction drives the loss down") {
    Tensor logits = Tensor::zeros({1, 1, V});
    logits.raw()['q'] = 30.0;
    IdMatrix targets = IdMatrix::zeros(1, 1);
    targets.at(0, 0) = 'q';
    BoolMask mask = BoolMask::full({1, 1}, true);
    CHECK(loss_iamtm(logits, targets, mask).item() < 1e-9);
  }
}
