// SPDX-License-Identifier: Apache-2.0
//
// Implicit-knowledge query transformer: a bank of learned queries attends to
// frozen encoder features and emits a fixed-size set of knowledge vectors.
// Also hosts the fusion block and decode heads used by the distillation
// objectives, and the learnable similarity temperature.

#pragma once

#include "vikdf/encoders.hpp"

namespace vikdf {

enum class KnowledgeSource { FromText, FromImage, Reconstructed };

struct KnowledgeVectors {
  Tensor k;  // [B, n_queries, d_k]
  KnowledgeSource source;
};

class IQFormer {
 public:
  IQFormer(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg);

  KnowledgeVectors distill_from_text(const TextEncoding& enc) const;
  KnowledgeVectors distill_from_image(const ImageEncoding& enc) const;

  const Tensor& query_bank() const { return queries_; }

 private:
  Tensor distill(const Tensor& enc_hidden, const BoolMask* mask) const;

  Tensor queries_;  // [n, d_k], shared across modalities
  std::vector<CrossLayer> layers_;
  LayerNormWeights final_ln_;
  std::int64_t n_, d_;
};

// Learnable InfoNCE temperature: tau = clamp(exp(log_tau), 0.01, 1.0).
class Temperature {
 public:
  Temperature(ParamRegistry& reg, double tau_init);
  Tensor tau() const;           // single-element graph tensor
  double tau_value() const;     // current clamped value
  static constexpr double kMin = 0.01;
  static constexpr double kMax = 1.0;

 private:
  Tensor log_tau_;
};

// One pre-norm cross-attention + FFN block: masked features attend to the
// knowledge vectors of the complementary modality.
class FusionBlock {
 public:
  FusionBlock(ParamRegistry& reg, Rng& rng, const std::string& prefix, std::int64_t d_feat,
              std::int64_t d_k, std::int64_t d_fuse, std::int64_t heads, std::int64_t ffn_mult,
              KnowledgeSource expected_source);

  // features: [B, L, d_feat]; knowledge.source must match expected_source.
  Tensor fuse(const Tensor& features, const KnowledgeVectors& knowledge) const;

 private:
  Tensor in_w_, in_b_;  // d_feat -> d_fuse
  LayerNormWeights ln_cross_, ln_ffn_;
  AttentionWeights cross_;
  FfnWeights ffn_;
  KnowledgeSource expected_;
};

// Fused patch features -> full image (conv stem + sub-pixel upsample).
class ImageDecodeHead {
 public:
  ImageDecodeHead(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg);
  // fused: [B, P, d_fuse] -> [B, 3, H, W]
  Tensor decode(const Tensor& fused) const;

 private:
  Tensor conv_w_, conv_b_;
  std::int64_t patch_, grid_, d_fuse_;
};

// Fused token features -> vocabulary logits.
class TextDecodeHead {
 public:
  TextDecodeHead(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg);
  // fused: [B, L, d_fuse] -> [B, L, V]
  Tensor predict(const Tensor& fused) const;

 private:
  Tensor w_, b_;
};

}  // namespace vikdf
