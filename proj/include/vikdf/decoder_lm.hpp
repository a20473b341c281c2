// SPDX-License-Identifier: Apache-2.0
//
// Frozen causal decoder language model. All weights are fixed at
// construction; conditioning information enters only through soft prompt
// vectors prepended to the input embedding sequence.

#pragma once

#include "vikdf/config.hpp"
#include "vikdf/tokenizer.hpp"
#include "vikdf/transformer.hpp"

namespace vikdf {

class DecoderLM {
 public:
  // Per-layer key/value tensors [B, Lc, d] for an already-processed prefix.
  // Cached tensors are detached constants: they carry no gradient path.
  struct Cache {
    std::vector<Tensor> k, v;
    std::int64_t len = 0;
  };

  DecoderLM(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg);

  // ids -> [B, L, d] token embeddings (constant: the table is frozen).
  Tensor embed_tokens(const IdMatrix& ids) const;
  // Adds absolute position embeddings for positions [offset, offset + L).
  Tensor add_positions(const Tensor& emb, std::int64_t offset) const;

  // Runs the layer stack over an embedded suffix [B, Ls, d], attending to
  // `cache` (if given) plus the suffix itself under a causal constraint.
  // key_mask, when given, covers all Lc + Ls key columns. When out_cache is
  // non-null it receives the full prefix cache (cache + this suffix).
  // Returns the raw residual stream [B, Ls, d].
  Tensor forward(const Tensor& emb_suffix, const BoolMask* key_mask, const Cache* cache,
                 Cache* out_cache) const;

  // Final layer norm over hidden states.
  Tensor final_norm(const Tensor& hidden) const;
  // Vocabulary logits [B, L, V] (applies final_norm internally).
  Tensor logits(const Tensor& hidden) const;

  std::int64_t d_model() const { return d_; }
  std::int64_t max_len() const { return max_len_; }

 private:
  Tensor tok_emb_, pos_emb_;
  std::vector<EncoderLayer> layers_;
  LayerNormWeights final_ln_;
  Tensor head_w_, head_b_;
  std::int64_t d_ = 0, heads_ = 0, max_len_ = 0;
};

}  // namespace vikdf
