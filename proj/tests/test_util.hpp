// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test suite: a small-but-valid model configuration,
// random tensor builders, and bitwise comparison utilities.

#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "vikdf/config.hpp"
#include "vikdf/rng.hpp"
#include "vikdf/tensor.hpp"

namespace testutil {

// Smallest configuration the validators accept; keeps model-level tests fast.
inline vikdf::ModelConfig micro_cfg() {
  vikdf::ModelConfig cfg;
  cfg.d_enc = 16;
  cfg.enc_layers = 1;
  cfg.enc_heads = 2;
  cfg.enc_ffn_mult = 2;
  cfg.max_text_len = 48;
  cfg.image_size = 24;
  cfg.patch_size = 4;
  cfg.n_queries = 2;
  cfg.d_k = 16;
  cfg.iq_layers = 1;
  cfg.iq_heads = 2;
  cfg.d_fuse = 16;
  cfg.d_lm = 16;
  cfg.lm_layers = 1;
  cfg.lm_heads = 2;
  cfg.lm_ffn_mult = 2;
  cfg.max_lm_len = 160;
  cfg.batch_size = 2;
  cfg.total_steps = 4;
  cfg.train_pairs = 4;
  return cfg;
}

inline vikdf::Tensor random_tensor(vikdf::Rng& rng, vikdf::Shape s, double scale = 1.0,
                                   bool requires_grad = false) {
  std::vector<double> v(static_cast<std::size_t>(vikdf::shape_numel(s)));
  for (auto& x : v) x = scale * rng.normal();
  vikdf::Tensor t = vikdf::Tensor::from_vector(std::move(s), std::move(v));
  t.set_requires_grad(requires_grad);
  return t;
}

inline bool bits_equal(const vikdf::Tensor& a, const vikdf::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.raw(), b.raw(), a.numel() * sizeof(double)) == 0;
}

inline bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

inline double max_abs_diff(const vikdf::Tensor& a, const vikdf::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.raw()[i] - b.raw()[i]));
  return m;
}

}  // namespace testutil
