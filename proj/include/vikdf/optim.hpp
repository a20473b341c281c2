// SPDX-License-Identifier: Apache-2.0
//
// AdamW over the trainable entries of a parameter registry: bias-corrected
// moments, decoupled weight decay, and global-norm gradient clipping.
// Weight decay is applied only to rank >= 2 tensors and never to the
// placeholder slots; scalars, biases, and norm gains are exempt.

#pragma once

#include "vikdf/config.hpp"
#include "vikdf/transformer.hpp"

namespace vikdf {

class AdamW {
 public:
  AdamW(ParamRegistry& reg, const ModelConfig& cfg);

  // Applies one update at the given learning rate using the gradients
  // currently stored on the parameters (missing buffers count as zero).
  // Returns the pre-clip global gradient norm.
  double step(double lr);

  std::int64_t step_count() const { return t_; }

  struct Slot {
    std::string name;
    Tensor param;
    std::vector<double> m, v;
    bool decay;
  };
  const std::vector<Slot>& slots() const { return slots_; }
  std::vector<Slot>& slots() { return slots_; }
  void set_step_count(std::int64_t t) { t_ = t; }

 private:
  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_, weight_decay_, grad_clip_;
  std::int64_t t_ = 0;
};

// Linear warmup to base_lr over warmup_steps, then constant or cosine decay
// to zero at total_steps. step is 1-based.
double lr_at_step(const ModelConfig& cfg, std::int64_t step);

}  // namespace vikdf
