// SPDX-License-Identifier: Apache-2.0

#include "vikdf/optim.hpp"

#include <cmath>

#include "vikdf/kernels.hpp"

namespace vikdf {

AdamW::AdamW(ParamRegistry& reg, const ModelConfig& cfg)
    : beta1_(cfg.adam_beta1),
      beta2_(cfg.adam_beta2),
      eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay),
      grad_clip_(cfg.grad_clip) {
  for (auto& e : reg.entries()) {
    if (e.frozen) continue;
    Slot s;
    s.name = e.name;
    s.param = e.tensor;
    s.m.assign(e.tensor.numel(), 0.0);
    s.v.assign(e.tensor.numel(), 0.0);
    s.decay = e.tensor.rank() >= 2 && e.name != "integration.slots";
    slots_.push_back(std::move(s));
  }
  if (slots_.empty()) throw ContractError("optimizer: no trainable parameters");
}

double AdamW::step(double lr) {
  double sq = 0.0;
  for (const auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    const double* g = s.param.grad().data();
    sq += kern::dot(g, g, s.param.numel());
  }
  double norm = std::sqrt(sq);
  if (!std::isfinite(norm))
    throw NumericError("optimizer: non-finite gradient norm " + std::to_string(norm));
  double scale = 1.0;
  if (grad_clip_ > 0.0 && norm > grad_clip_) scale = grad_clip_ / norm;

  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& s : slots_) {
    double* w = s.param.raw();
    const double* g = s.param.has_grad() ? s.param.grad().data() : nullptr;
    double wd = s.decay ? weight_decay_ : 0.0;
    for (std::size_t i = 0; i < s.param.numel(); ++i) {
      double gi = g ? g[i] * scale : 0.0;
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * gi;
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * gi * gi;
      double mhat = s.m[i] / bc1;
      double vhat = s.v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd * w[i]);
    }
  }
  return norm;
}

double lr_at_step(const ModelConfig& cfg, std::int64_t step) {
  std::int64_t warmup = static_cast<std::int64_t>(cfg.warmup_frac * static_cast<double>(cfg.total_steps));
  if (warmup > 0 && step <= warmup)
    return cfg.lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (cfg.lr_decay == "cosine" && cfg.total_steps > warmup) {
    double progress = static_cast<double>(step - warmup) / static_cast<double>(cfg.total_steps - warmup);
    if (progress > 1.0) progress = 1.0;
    return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
  }
  return cfg.lr;
}

}  // namespace vikdf
