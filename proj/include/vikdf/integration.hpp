// SPDX-License-Identifier: Apache-2.0
//
// Stage-2 objectives: knowledge enters the frozen decoder as soft prompts
// (contextual-inference NLL) and is read back out of it through placeholder
// slots (knowledge-reconstruction MSE).

#pragma once

#include "vikdf/decoder_lm.hpp"
#include "vikdf/iqformer.hpp"

namespace vikdf {

class KnowledgeProjector {
 public:
  KnowledgeProjector(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg);

  // [B, n, d_lm] -> [B, n, d_k] readout projection for reconstructed slots.
  Tensor from_decoder_hidden(const Tensor& h) const;

  const Tensor& in_w() const { return in_w_; }
  const Tensor& in_b() const { return in_b_; }
  const Tensor& slots() const { return slots_; }

 private:
  Tensor in_w_, in_b_;    // d_k -> d_lm
  Tensor out_w_, out_b_;  // d_lm -> d_k
  Tensor slots_;          // [n_queries, d_lm]
};

// Knowledge -> soft prompt embeddings [B, n, d_lm]. The frozen decoder only
// ever consumes text-derived knowledge; any other source is a contract error.
Tensor project_knowledge_to_llm(const KnowledgeProjector& proj, const KnowledgeVectors& k);

// Teacher-forced mean NLL over the decoder input [soft prompts; rows].
// Row b's tokens at indices [target_start[b], row end) are the prediction
// targets (rows may carry a terminal PAD so the model learns to stop);
// earlier indices act as the conditioning prompt/context. Rows with no
// target raise InputError.
Tensor loss_iaci(const DecoderLM& lm, const KnowledgeProjector& proj, const KnowledgeVectors& k,
                 const ByteTokenizer::Batch& rows, const std::vector<std::int64_t>& target_start);

// Precomputed key/value cache for a constant prompt prefix (batch 1).
DecoderLM::Cache make_prompt_cache(const DecoderLM& lm, const std::vector<std::int32_t>& prompt_ids);
// Replicates a batch-1 cache across a batch (constants only).
DecoderLM::Cache replicate_cache(const DecoderLM::Cache& cache, std::int64_t batch);

// Runs the frozen decoder over [reconstruction prompt; text; slot rows] and
// projects the slot hidden states back into knowledge space. readout:
// "slots" appends learned placeholder rows; "last_tokens" reads the final
// n_queries valid text positions instead. prompt_cache_b1, when given, must
// be make_prompt_cache(lm, prompt_ids) and skips re-encoding the prompt.
KnowledgeVectors reconstruct_knowledge(const DecoderLM& lm, const KnowledgeProjector& proj,
                                       const ByteTokenizer::Batch& text,
                                       const std::vector<std::int32_t>& prompt_ids,
                                       const std::string& readout,
                                       const DecoderLM::Cache* prompt_cache_b1 = nullptr);

// Mean squared error between original and reconstructed knowledge. Gradient
// reaches both sides: k is not detached.
Tensor loss_iakr(const KnowledgeVectors& k, const KnowledgeVectors& k_hat);

}  // namespace vikdf
