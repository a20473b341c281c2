// SPDX-License-Identifier: Apache-2.0
//
// AdamW update math against a hand-computed oracle, clipping semantics, the
// decay/no-decay partition over a real model, and the learning-rate schedule.

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "vikdf/model.hpp"
#include "vikdf/optim.hpp"

using namespace vikdf;

namespace {

void set_grad(Tensor& t, const std::vector<double>& g) {
  REQUIRE(g.size() == t.numel());
  t.node()->ensure_grad();
  std::copy(g.begin(), g.end(), t.grad_raw());
}

ModelConfig opt_cfg() {
  ModelConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.04;
  cfg.grad_clip = 0.0;  // off unless a case says otherwise
  cfg.adam_beta1 = 0.9;
  cfg.adam_beta2 = 0.999;
  cfg.adam_eps = 1e-8;
  return cfg;
}

}  // namespace

TEST_CASE("single AdamW step matches the closed-form update") {
  ModelConfig cfg = opt_cfg();
  ParamRegistry reg;
  Tensor w = reg.add("blk.w", Tensor::from_vector({2, 2}, {1.0, -2.0, 0.5, 3.0}), false);
  Tensor b = reg.add("blk.b", Tensor::from_vector({2}, {0.25, -0.75}), false);
  AdamW opt(reg, cfg);

  std::vector<double> gw = {0.3, -0.1, 0.0, 2.0};
  std::vector<double> gb = {-0.6, 0.05};
  set_grad(w, gw);
  set_grad(b, gb);

  std::vector<double> w0(w.raw(), w.raw() + w.numel());
  std::vector<double> b0(b.raw(), b.raw() + b.numel());
  double norm = opt.step(cfg.lr);

  double sq = 0.0;
  for (double g : gw) sq += g * g;
  for (double g : gb) sq += g * g;
  CHECK(norm == doctest::Approx(std::sqrt(sq)).epsilon(1e-12));
  CHECK(opt.step_count() == 1);

  // t=1: mhat = g, vhat = g*g, so the Adam term is g/(|g|+eps).
  for (std::size_t i = 0; i < gw.size(); ++i) {
    double adam = gw[i] == 0.0 ? 0.0 : gw[i] / (std::abs(gw[i]) + cfg.adam_eps);
    double want = w0[i] - cfg.lr * (adam + cfg.weight_decay * w0[i]);
    CHECK(w.raw()[i] == doctest::Approx(want).epsilon(1e-12));
  }
  // Rank-1 tensors are exempt from decay.
  for (std::size_t i = 0; i < gb.size(); ++i) {
    double adam = gb[i] / (std::abs(gb[i]) + cfg.adam_eps);
    double want = b0[i] - cfg.lr * adam;
    CHECK(b.raw()[i] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("two steps track the moment recursions") {
  ModelConfig cfg = opt_cfg();
  cfg.weight_decay = 0.0;
  ParamRegistry reg;
  Tensor w = reg.add("blk.w", Tensor::from_vector({1, 2}, {0.0, 0.0}), false);
  AdamW opt(reg, cfg);

  std::vector<double> g1 = {1.0, -0.5}, g2 = {-0.25, 2.0};
  double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {0.0, 0.0};
  auto oracle_step = [&](const std::vector<double>& g, int t) {
    double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
    double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);
    for (int i = 0; i < 2; ++i) {
      m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
      v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
      x[i] -= cfg.lr * ((m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps));
    }
  };

  set_grad(w, g1);
  opt.step(cfg.lr);
  oracle_step(g1, 1);
  w.zero_grad();
  set_grad(w, g2);
  opt.step(cfg.lr);
  oracle_step(g2, 2);

  CHECK(w.raw()[0] == doctest::Approx(x[0]).epsilon(1e-12));
  CHECK(w.raw()[1] == doctest::Approx(x[1]).epsilon(1e-12));
  CHECK(opt.step_count() == 2);
}

TEST_CASE("global-norm clipping rescales every gradient") {
  ModelConfig cfg = opt_cfg();
  cfg.weight_decay = 0.0;
  cfg.grad_clip = 1.0;
  ParamRegistry reg;
  Tensor w = reg.add("blk.w", Tensor::zeros({1, 2}), false);
  AdamW opt(reg, cfg);

  set_grad(w, {3.0, 4.0});  // norm 5 -> scale 0.2
  double norm = opt.step(cfg.lr);
  CHECK(norm == doctest::Approx(5.0).epsilon(1e-12));
  for (int i = 0; i < 2; ++i) {
    double g = (i == 0 ? 3.0 : 4.0) * 0.2;
    double want = -cfg.lr * (g / (std::abs(g) + cfg.adam_eps));
    CHECK(w.raw()[i] == doctest::Approx(want).epsilon(1e-10));
  }

  SUBCASE("norms at or below the threshold are untouched") {
    ParamRegistry reg2;
    Tensor u = reg2.add("blk.u", Tensor::zeros({1, 1}), false);
    AdamW o2(reg2, cfg);
    set_grad(u, {0.5});
    CHECK(o2.step(cfg.lr) == doctest::Approx(0.5).epsilon(1e-12));
    double want = -cfg.lr * (0.5 / (0.5 + cfg.adam_eps));
    CHECK(u.raw()[0] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("missing gradients behave as zero") {
  ModelConfig cfg = opt_cfg();
  cfg.weight_decay = 0.0;
  ParamRegistry reg;
  Tensor w = reg.add("blk.w", Tensor::from_vector({1, 1}, {2.0}), false);
  Tensor b = reg.add("blk.b", Tensor::from_vector({1}, {5.0}), false);
  AdamW opt(reg, cfg);
  set_grad(w, {1.0});
  double norm = opt.step(cfg.lr);
  CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(b.raw()[0] == 5.0);  // zero grad, zero decay: bitwise unchanged
  CHECK(w.raw()[0] < 2.0);
}

TEST_CASE("non-finite gradients are a numeric error") {
  ModelConfig cfg = opt_cfg();
  ParamRegistry reg;
  Tensor w = reg.add("blk.w", Tensor::zeros({1, 1}), false);
  AdamW opt(reg, cfg);
  set_grad(w, {std::numeric_limits<double>::quiet_NaN()});
  CHECK_THROWS_AS(opt.step(cfg.lr), NumericError);
}

TEST_CASE("an all-frozen registry cannot be optimized") {
  ModelConfig cfg = opt_cfg();
  ParamRegistry reg;
  reg.add("lm.w", Tensor::zeros({2, 2}), true);
  CHECK_THROWS_AS(AdamW(reg, cfg), ContractError);
}

TEST_CASE("slot partition over a full model") {
  ModelConfig cfg = testutil::micro_cfg();
  VikdfModel m(cfg);
  AdamW opt(m.reg, cfg);

  std::size_t trainable = 0;
  for (const auto& e : m.reg.entries())
    if (!e.frozen) ++trainable;
  CHECK(opt.slots().size() == trainable);

  bool saw_slots = false, saw_matrix_decay = false, saw_vector = false;
  for (const auto& s : opt.slots()) {
    CHECK(s.name.rfind("text_enc.", 0) != 0);
    CHECK(s.name.rfind("image_enc.", 0) != 0);
    CHECK(s.name.rfind("lm.", 0) != 0);
    bool want_decay = s.param.rank() >= 2 && s.name != "integration.slots";
    CHECK(s.decay == want_decay);
    if (s.name == "integration.slots") {
      saw_slots = true;
      CHECK_FALSE(s.decay);
    }
    if (s.decay) saw_matrix_decay = true;
    if (s.param.rank() < 2) {
      saw_vector = true;
      CHECK_FALSE(s.decay);
    }
  }
  CHECK(saw_slots);
  CHECK(saw_matrix_decay);
  CHECK(saw_vector);
}

TEST_CASE("learning-rate schedule") {
  ModelConfig cfg;
  cfg.lr = 2e-3;
  cfg.total_steps = 100;
  cfg.warmup_frac = 0.1;  // warmup = 10
  cfg.lr_decay = "none";

  SUBCASE("linear warmup then constant") {
    CHECK(lr_at_step(cfg, 1) == doctest::Approx(cfg.lr * 0.1).epsilon(1e-15));
    CHECK(lr_at_step(cfg, 5) == doctest::Approx(cfg.lr * 0.5).epsilon(1e-15));
    CHECK(lr_at_step(cfg, 10) == doctest::Approx(cfg.lr).epsilon(1e-15));
    CHECK(lr_at_step(cfg, 11) == cfg.lr);
    CHECK(lr_at_step(cfg, 100) == cfg.lr);
  }

  SUBCASE("cosine decay to zero") {
    cfg.lr_decay = "cosine";
    CHECK(lr_at_step(cfg, 5) == doctest::Approx(cfg.lr * 0.5).epsilon(1e-15));
    // Midpoint of the decay span (step 55 of 10..100).
    CHECK(lr_at_step(cfg, 55) == doctest::Approx(cfg.lr * 0.5).epsilon(1e-12));
    CHECK(std::abs(lr_at_step(cfg, 100)) < 1e-15);
    // Step 40 is a third of the way through the 10..100 decay span.
    double third = cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 / 3.0));
    CHECK(lr_at_step(cfg, 40) == doctest::Approx(third).epsilon(1e-12));
  }

  SUBCASE("zero warmup starts at full rate") {
    cfg.warmup_frac = 0.0;
    CHECK(lr_at_step(cfg, 1) == cfg.lr);
  }
}
