// SPDX-License-Identifier: Apache-2.0

#include "vikdf/iqformer.hpp"

#include <cmath>

namespace vikdf {

IQFormer::IQFormer(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg)
    : n_(cfg.n_queries), d_(cfg.d_k) {
  queries_ = reg.add("iqformer.query_bank", init_normal(rng, {n_, d_}, 1.0), false);
  for (std::int64_t i = 0; i < cfg.iq_layers; ++i)
    layers_.push_back(make_cross_layer(reg, rng, "iqformer.layer" + std::to_string(i), d_,
                                       cfg.d_enc, cfg.iq_heads, cfg.enc_ffn_mult, false));
  final_ln_ = make_layer_norm(reg, rng, "iqformer.final_ln", d_, false);
}

Tensor IQFormer::distill(const Tensor& enc_hidden, const BoolMask* mask) const {
  std::int64_t B = enc_hidden.dim(0);
  Tensor x = ops::broadcast_rows(queries_, B);
  for (const auto& l : layers_) x = cross_layer_forward(l, x, enc_hidden, mask);
  return ops::layer_norm(x, final_ln_.g, final_ln_.b);
}

KnowledgeVectors IQFormer::distill_from_text(const TextEncoding& enc) const {
  return KnowledgeVectors{distill(enc.hidden, &enc.attention_mask), KnowledgeSource::FromText};
}

KnowledgeVectors IQFormer::distill_from_image(const ImageEncoding& enc) const {
  return KnowledgeVectors{distill(enc.hidden, nullptr), KnowledgeSource::FromImage};
}

Temperature::Temperature(ParamRegistry& reg, double tau_init) {
  if (!(tau_init > 0.0)) throw InputError("temperature: tau_init must be positive");
  log_tau_ = reg.add("temperature.log_tau", Tensor::scalar(std::log(tau_init)), false);
}

Tensor Temperature::tau() const { return ops::clamp(ops::exp_elem(log_tau_), kMin, kMax); }

double Temperature::tau_value() const {
  double t = std::exp(log_tau_.raw()[0]);
  return t < kMin ? kMin : (t > kMax ? kMax : t);
}

FusionBlock::FusionBlock(ParamRegistry& reg, Rng& rng, const std::string& prefix,
                         std::int64_t d_feat, std::int64_t d_k, std::int64_t d_fuse,
                         std::int64_t heads, std::int64_t ffn_mult, KnowledgeSource expected_source)
    : expected_(expected_source) {
  in_w_ = reg.add(prefix + ".in_w", init_linear_weight(rng, d_feat, d_fuse), false);
  in_b_ = reg.add(prefix + ".in_b", init_zeros({d_fuse}), false);
  ln_cross_ = make_layer_norm(reg, rng, prefix + ".ln_cross", d_fuse, false);
  cross_ = make_attention(reg, rng, prefix + ".cross", d_fuse, d_k, heads, false);
  ln_ffn_ = make_layer_norm(reg, rng, prefix + ".ln_ffn", d_fuse, false);
  ffn_ = make_ffn(reg, rng, prefix + ".ffn", d_fuse, ffn_mult, false);
}

Tensor FusionBlock::fuse(const Tensor& features, const KnowledgeVectors& knowledge) const {
  if (knowledge.source != expected_)
    throw ContractError("fuse_knowledge: knowledge source does not complement the masked modality");
  if (features.rank() != 3)
    throw DimensionError("fuse_knowledge: features must be [B,L,d], got " + shape_str(features.shape()));
  if (knowledge.k.dim(0) != features.dim(0))
    throw DimensionError("fuse_knowledge: batch mismatch between features and knowledge");
  Tensor x = ops::linear(features, in_w_, in_b_);
  Tensor n1 = ops::layer_norm(x, ln_cross_.g, ln_cross_.b);
  x = ops::add(x, attention_forward(cross_, n1, knowledge.k, nullptr, -1, false));
  Tensor n2 = ops::layer_norm(x, ln_ffn_.g, ln_ffn_.b);
  return ops::add(x, ffn_forward(ffn_, n2));
}

ImageDecodeHead::ImageDecodeHead(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg)
    : patch_(cfg.patch_size), grid_(cfg.patches_per_side()), d_fuse_(cfg.d_fuse) {
  std::int64_t cout = 3 * patch_ * patch_;
  double std = 1.0 / std::sqrt(static_cast<double>(d_fuse_ * 9));
  conv_w_ = reg.add("img_head.conv_w", init_normal(rng, {cout, d_fuse_, 3, 3}, std), false);
  conv_b_ = reg.add("img_head.conv_b", init_zeros({cout}), false);
}

Tensor ImageDecodeHead::decode(const Tensor& fused) const {
  if (fused.rank() != 3 || fused.dim(1) != grid_ * grid_ || fused.dim(2) != d_fuse_)
    throw DimensionError("decode_image_patches: expected [B," + std::to_string(grid_ * grid_) +
                         "," + std::to_string(d_fuse_) + "], got " + shape_str(fused.shape()));
  std::int64_t B = fused.dim(0);
  Tensor grid = ops::reshape(ops::transpose_12(fused), {B, d_fuse_, grid_, grid_});
  Tensor conv = ops::conv2d(grid, conv_w_, conv_b_, 1, 1);
  return ops::pixel_shuffle(conv, patch_);
}

TextDecodeHead::TextDecodeHead(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg) {
  w_ = reg.add("txt_head.w", init_linear_weight(rng, cfg.d_fuse, tok::kVocabSize), false);
  b_ = reg.add("txt_head.b", init_zeros({tok::kVocabSize}), false);
}

Tensor TextDecodeHead::predict(const Tensor& fused) const {
  if (fused.rank() != 3)
    throw DimensionError("predict_masked_tokens: expected [B,L,d], got " + shape_str(fused.shape()));
  return ops::linear(fused, w_, b_);
}

}  // namespace vikdf
