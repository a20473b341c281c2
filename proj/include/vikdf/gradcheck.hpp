// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference gradient verification.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vikdf/tensor.hpp"

namespace vikdf {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Evaluates f() twice per perturbed parameter entry (central differences with
// step h) and compares against the reverse-mode gradient of a single f()
// evaluation. Relative error is |ad - fd| / max(1, |fd|). The function f
// must rebuild its graph from the current parameter values on every call.
GradCheckResult grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double h = 1e-5);

struct LossGradReport {
  std::string loss;
  std::uint64_t config_seed = 0;
  GradCheckResult result;
  bool pass = false;
};

// Checks every loss term and both composite objectives on `configs` random
// toy model configurations (batch <= 3, n_queries <= 4, dims <= 8), each
// against central differences over representative full parameter tensors
// from every trainable module on the loss's gradient path.
std::vector<LossGradReport> check_loss_gradients(std::uint64_t seed, int configs, double tol);

}  // namespace vikdf
