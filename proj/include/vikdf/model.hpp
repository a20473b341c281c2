// SPDX-License-Identifier: Apache-2.0
//
// Full model wiring: frozen encoder towers, the query transformer and its
// heads, the frozen decoder, and the knowledge projector, all registered in
// one fixed construction order so a (seed, config) pair determines every
// parameter. Also assembles the stage-1 and stage-2 training objectives.

#pragma once

#include <memory>
#include <optional>

#include "vikdf/data.hpp"
#include "vikdf/decoder_lm.hpp"
#include "vikdf/distillation.hpp"
#include "vikdf/integration.hpp"

namespace vikdf {

struct VikdfModel {
  ModelConfig cfg;
  ParamRegistry reg;
  Rng init_rng;  // drained during construction; not used afterwards
  TextEncoder text_enc;
  ImageEncoder image_enc;
  IQFormer iq;
  Temperature temperature;
  FusionBlock image_fuser;  // masked image features attend text knowledge
  ImageDecodeHead img_head;
  FusionBlock text_fuser;  // masked text features attend image knowledge
  TextDecodeHead txt_head;
  DecoderLM lm;
  KnowledgeProjector proj;

  explicit VikdfModel(const ModelConfig& c);

  // Knowledge from raw byte strings (BOS-prefixed, padded internally).
  KnowledgeVectors knowledge_from_texts(const std::vector<std::string>& texts) const;
};

// One training batch with its mask plans. `images` and `masked_images` are
// constants; targets never require gradients.
struct PairBatch {
  Tensor images;
  Tensor masked_images;
  BoolMask image_mask;  // [B, P]
  ByteTokenizer::Batch enc_text;         // BOS + caption
  ByteTokenizer::Batch enc_text_masked;  // BOS + caption with MASK substitutions
  BoolMask text_mask_plan;               // [B, L_enc]
  ByteTokenizer::Batch lm_rows;          // caption prompt + caption + terminal PAD
  std::vector<std::int64_t> lm_target_start;
  ByteTokenizer::Batch recon_text;  // caption bytes only
  std::vector<std::int64_t> attributes;
};

// Assembles a batch from corpus samples at the given indices; mask plans and
// nothing else consume the rng.
PairBatch make_pair_batch(const VikdfModel& model, const PairSet& corpus,
                          const std::vector<std::int64_t>& indices, Rng& rng);

struct KdTerms {
  Tensor total;
  std::optional<Tensor> tim, tamim, iamtm;
};
struct KiTerms {
  Tensor total;
  std::optional<Tensor> iaci, iakr;
};

// Stage-1 loss over a batch. kt/ki are the shared knowledge vectors for the
// batch (clean text / clean image).
KdTerms compute_kd(const VikdfModel& model, const PairBatch& batch, const KnowledgeVectors& kt,
                   const KnowledgeVectors& ki);

// Stage-2 loss. prompt_cache_b1, when given, must hold the reconstruction
// prompt processed at batch 1.
KiTerms compute_ki(const VikdfModel& model, const PairBatch& batch, const KnowledgeVectors& kt,
                   const DecoderLM::Cache* prompt_cache_b1 = nullptr);

}  // namespace vikdf
