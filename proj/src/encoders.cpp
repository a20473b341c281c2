// SPDX-License-Identifier: Apache-2.0

#include "vikdf/encoders.hpp"

namespace vikdf {
namespace {

constexpr double kPosEmbStd = 0.3;

IdMatrix iota_ids(std::int64_t rows, std::int64_t cols) {
  IdMatrix m = IdMatrix::zeros(rows, cols);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c) m.at(r, c) = static_cast<std::int32_t>(c);
  return m;
}

}  // namespace

TextEncoder::TextEncoder(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg, bool frozen)
    : d_(cfg.d_enc), max_len_(cfg.max_text_len) {
  tok_emb_ = reg.add("text_enc.tok_emb", init_normal(rng, {tok::kVocabSize, d_}, 1.0), frozen);
  pos_emb_ = reg.add("text_enc.pos_emb", init_normal(rng, {max_len_, d_}, kPosEmbStd), frozen);
  for (std::int64_t i = 0; i < cfg.enc_layers; ++i)
    layers_.push_back(make_encoder_layer(reg, rng, "text_enc.layer" + std::to_string(i), d_,
                                         cfg.enc_heads, cfg.enc_ffn_mult, frozen));
  final_ln_ = make_layer_norm(reg, rng, "text_enc.final_ln", d_, frozen);
}

TextEncoding TextEncoder::encode(const IdMatrix& tokens, const BoolMask& mask) const {
  if (tokens.rows <= 0 || tokens.cols <= 0) throw InputError("encode_text: empty token matrix");
  if (tokens.cols > max_len_)
    throw TruncationError("encode_text: sequence length " + std::to_string(tokens.cols) +
                          " exceeds max_text_len " + std::to_string(max_len_));
  if (mask.shape != Shape{tokens.rows, tokens.cols})
    throw DimensionError("encode_text: mask " + shape_str(mask.shape) + " does not match tokens");
  for (std::int64_t b = 0; b < tokens.rows; ++b) {
    bool any = false;
    for (std::int64_t l = 0; l < tokens.cols; ++l)
      if (mask.v[static_cast<std::size_t>(b * tokens.cols + l)]) any = true;
    if (!any)
      throw DegenerateMaskError("encode_text: sample " + std::to_string(b) + " has no real tokens");
  }
  Tensor x = ops::add(ops::embedding(tok_emb_, tokens),
                      ops::embedding(pos_emb_, iota_ids(tokens.rows, tokens.cols)));
  for (const auto& l : layers_) x = encoder_layer_forward(l, x, &mask, -1, false);
  x = ops::layer_norm(x, final_ln_.g, final_ln_.b);
  return TextEncoding{x, mask};
}

ImageEncoder::ImageEncoder(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg, bool frozen)
    : d_(cfg.d_enc), image_size_(cfg.image_size), patch_(cfg.patch_size),
      grid_(cfg.patches_per_side()) {
  std::int64_t pd = 3 * patch_ * patch_;
  patch_w_ = reg.add("image_enc.patch_w", init_linear_weight(rng, pd, d_), frozen);
  patch_b_ = reg.add("image_enc.patch_b", init_zeros({d_}), frozen);
  pos_emb_ = reg.add("image_enc.pos_emb", init_normal(rng, {grid_ * grid_, d_}, kPosEmbStd), frozen);
  for (std::int64_t i = 0; i < cfg.enc_layers; ++i)
    layers_.push_back(make_encoder_layer(reg, rng, "image_enc.layer" + std::to_string(i), d_,
                                         cfg.enc_heads, cfg.enc_ffn_mult, frozen));
  final_ln_ = make_layer_norm(reg, rng, "image_enc.final_ln", d_, frozen);
}

ImageEncoding ImageEncoder::encode(const Tensor& pixels) const {
  ++encode_calls_;
  if (pixels.rank() != 4 || pixels.dim(1) != 3 || pixels.dim(2) != image_size_ ||
      pixels.dim(3) != image_size_)
    throw DimensionError("encode_image: expected [B,3," + std::to_string(image_size_) + "," +
                         std::to_string(image_size_) + "], got " + shape_str(pixels.shape()));
  for (std::size_t i = 0; i < pixels.numel(); ++i) {
    double v = pixels.raw()[i];
    if (!(v >= 0.0 && v <= 1.0))
      throw InputError("encode_image: pixel value " + std::to_string(v) + " outside [0,1]");
  }
  std::int64_t B = pixels.dim(0), P = grid_ * grid_, pd = 3 * patch_ * patch_;
  // [B,3,H,W] -> [B,3*p*p,gh,gw] -> [B,3*p*p,P] -> [B,P,3*p*p] -> linear
  Tensor patches = ops::transpose_12(
      ops::reshape(ops::pixel_unshuffle(pixels, patch_), {B, pd, P}));
  Tensor x = ops::linear(patches, patch_w_, patch_b_);
  x = ops::add(x, ops::embedding(pos_emb_, iota_ids(B, P)));
  for (const auto& l : layers_) x = encoder_layer_forward(l, x, nullptr, -1, false);
  x = ops::layer_norm(x, final_ln_.g, final_ln_.b);
  return ImageEncoding{x, grid_};
}

}  // namespace vikdf
