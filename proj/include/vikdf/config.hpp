// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value run configuration. One struct drives model construction,
// training, and the CLI; the serialized form is embedded verbatim in
// checkpoints so a run can be reconstructed from its artifacts.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vikdf/tensor.hpp"

namespace vikdf {

struct ModelConfig {
  // encoders
  std::int64_t d_enc = 64;
  std::int64_t enc_layers = 2;
  std::int64_t enc_heads = 4;
  std::int64_t enc_ffn_mult = 4;
  std::int64_t max_text_len = 64;
  std::int64_t image_size = 32;
  std::int64_t image_channels = 3;
  std::int64_t patch_size = 4;

  // knowledge extraction
  std::int64_t n_queries = 8;
  std::int64_t d_k = 64;
  std::int64_t iq_layers = 2;
  std::int64_t iq_heads = 4;
  std::int64_t d_fuse = 64;
  std::string pooling = "mean";              // mean | max_pairwise
  std::string knowledge_readout = "slots";   // slots | last_tokens

  // decoder language model
  std::int64_t d_lm = 64;
  std::int64_t lm_layers = 4;
  std::int64_t lm_heads = 4;
  std::int64_t lm_ffn_mult = 4;
  std::int64_t max_lm_len = 192;

  // masking
  double mask_ratio_image = 0.6;
  double mask_ratio_text = 0.15;

  // loss weights
  double lambda_tim = 0.5;
  double lambda_tamim = 0.2;
  double lambda_iamtm = 0.2;
  double lambda_iaci = 1.0;
  double lambda_iakr = 0.5;
  double tau_init = 0.07;

  // prompts
  std::string caption_prompt = "Write a short description for the image.";
  std::string reconstruction_prompt = "Create an image that reflects the following description:";

  // optimization
  double lr = 1e-3;
  double weight_decay = 0.0;
  double warmup_frac = 0.1;
  double grad_clip = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::int64_t total_steps = 5000;
  std::int64_t batch_size = 16;
  std::string lr_decay = "none";  // none | cosine
  std::string objective_mode = "joint";  // joint | alternating

  // data
  std::uint64_t seed = 1234;
  std::uint64_t data_seed = 77;
  std::int64_t attribute_count = 4;
  std::int64_t train_pairs = 1024;
  bool shuffle_attributes = false;

  // ablation switches
  bool disable_tim = false;
  bool disable_tamim = false;
  bool disable_iamtm = false;
  bool disable_bvif = false;

  // decoding
  std::int64_t max_decode_len = 64;

  std::int64_t patches_per_side() const { return image_size / patch_size; }
  std::int64_t patch_count() const { return patches_per_side() * patches_per_side(); }

  // Throws on invalid / inconsistent settings.
  void validate() const;

  // Canonical text form (fixed key order, full float precision).
  std::string serialize() const;
  // Applies `key = value` assignments from text; unknown keys are rejected.
  void apply_text(const std::string& text);
  void apply_assignment(const std::string& key, const std::string& value);

  static ModelConfig desk_preset() { return ModelConfig{}; }
  static ModelConfig paper_preset();
  static ModelConfig from_file(const std::string& path);
};

}  // namespace vikdf
