// SPDX-License-Identifier: Apache-2.0
//
// Frozen text and image encoders. Both are randomly initialized from the
// run seed, then never updated; they define fixed feature spaces that the
// rest of the model distills from.

#pragma once

#include "vikdf/config.hpp"
#include "vikdf/tokenizer.hpp"
#include "vikdf/transformer.hpp"

namespace vikdf {

struct TextEncoding {
  Tensor hidden;            // [B, L, d_enc]
  BoolMask attention_mask;  // [B, L], true at real tokens
};

struct ImageEncoding {
  Tensor hidden;       // [B, P, d_enc]
  std::int64_t grid;   // patches per side
};

class TextEncoder {
 public:
  TextEncoder(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg, bool frozen = true);

  // tokens: [B, L] ids with mask marking real positions. Positions where the
  // mask is false contribute nothing to attention.
  TextEncoding encode(const IdMatrix& tokens, const BoolMask& mask) const;

  const Tensor& token_table() const { return tok_emb_; }

 private:
  Tensor tok_emb_;  // [V, d]
  Tensor pos_emb_;  // [max_text_len, d]
  std::vector<EncoderLayer> layers_;
  LayerNormWeights final_ln_;
  std::int64_t d_, max_len_;
};

class ImageEncoder {
 public:
  ImageEncoder(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg, bool frozen = true);

  // pixels: [B, 3, H, W] with values in [0, 1].
  ImageEncoding encode(const Tensor& pixels) const;

  // Lifetime encode() count; text-only paths must leave it untouched.
  std::int64_t encode_calls() const { return encode_calls_; }

 private:
  mutable std::int64_t encode_calls_ = 0;
  Tensor patch_w_, patch_b_;  // linear patch embedding [3*p*p, d]
  Tensor pos_emb_;            // [P, d]
  std::vector<EncoderLayer> layers_;
  LayerNormWeights final_ln_;
  std::int64_t d_, image_size_, patch_, grid_;
};

}  // namespace vikdf
