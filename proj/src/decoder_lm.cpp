// SPDX-License-Identifier: Apache-2.0

#include "vikdf/decoder_lm.hpp"

#include "vikdf/ops.hpp"

namespace vikdf {

namespace {
constexpr double kPosEmbStd = 0.3;
}

DecoderLM::DecoderLM(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg)
    : d_(cfg.d_lm), heads_(cfg.lm_heads), max_len_(cfg.max_lm_len) {
  tok_emb_ = reg.add("lm.tok_emb", init_normal(rng, {tok::kVocabSize, d_}, 1.0), true);
  pos_emb_ = reg.add("lm.pos_emb", init_normal(rng, {max_len_, d_}, kPosEmbStd), true);
  for (std::int64_t i = 0; i < cfg.lm_layers; ++i)
    layers_.push_back(make_encoder_layer(reg, rng, "lm.layer" + std::to_string(i), d_,
                                         heads_, cfg.lm_ffn_mult, true));
  final_ln_ = make_layer_norm(reg, rng, "lm.final_ln", d_, true);
  head_w_ = reg.add("lm.head_w", init_linear_weight(rng, d_, tok::kVocabSize), true);
  head_b_ = reg.add("lm.head_b", init_zeros({tok::kVocabSize}), true);
}

Tensor DecoderLM::embed_tokens(const IdMatrix& ids) const { return ops::embedding(tok_emb_, ids); }

Tensor DecoderLM::add_positions(const Tensor& emb, std::int64_t offset) const {
  if (emb.rank() != 3 || emb.dim(2) != d_)
    throw DimensionError("decoder: embeddings must be [B,L," + std::to_string(d_) + "], got " +
                         shape_str(emb.shape()));
  std::int64_t L = emb.dim(1);
  if (offset < 0 || offset + L > max_len_)
    throw TruncationError("decoder: positions [" + std::to_string(offset) + "," +
                          std::to_string(offset + L) + ") exceed max_lm_len " +
                          std::to_string(max_len_));
  IdMatrix pos = IdMatrix::zeros(emb.dim(0), L);
  for (std::int64_t b = 0; b < emb.dim(0); ++b)
    for (std::int64_t j = 0; j < L; ++j) pos.at(b, j) = static_cast<std::int32_t>(offset + j);
  return ops::add(emb, ops::embedding(pos_emb_, pos));
}

Tensor DecoderLM::forward(const Tensor& emb_suffix, const BoolMask* key_mask, const Cache* cache,
                          Cache* out_cache) const {
  if (emb_suffix.rank() != 3 || emb_suffix.dim(2) != d_)
    throw DimensionError("decoder: suffix must be [B,Ls," + std::to_string(d_) + "], got " +
                         shape_str(emb_suffix.shape()));
  std::int64_t B = emb_suffix.dim(0), Ls = emb_suffix.dim(1);
  std::int64_t Lc = 0;
  if (cache) {
    if (cache->k.size() != layers_.size() || cache->v.size() != layers_.size())
      throw ContractError("decoder: cache layer count does not match the model");
    Lc = cache->len;
    if (cache->k[0].dim(0) != B)
      throw DimensionError("decoder: cache batch " + std::to_string(cache->k[0].dim(0)) +
                           " does not match suffix batch " + std::to_string(B));
  }
  if (key_mask && key_mask->shape != Shape{B, Lc + Ls})
    throw DimensionError("decoder: key mask must be [B," + std::to_string(Lc + Ls) + "], got " +
                         shape_str(key_mask->shape));
  if (out_cache) {
    out_cache->k.clear();
    out_cache->v.clear();
    out_cache->len = Lc + Ls;
  }

  Tensor x = emb_suffix;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const EncoderLayer& ly = layers_[l];
    Tensor n1 = ops::layer_norm(x, ly.ln1.g, ly.ln1.b);
    Tensor q = ops::linear(n1, ly.attn.wq, ly.attn.bq);
    Tensor k = ops::linear(n1, ly.attn.wk, ly.attn.bk);
    Tensor v = ops::linear(n1, ly.attn.wv, ly.attn.bv);
    if (cache) {
      k = ops::concat_dim1({cache->k[l], k});
      v = ops::concat_dim1({cache->v[l], v});
    }
    if (out_cache) {
      out_cache->k.push_back(k.detach());
      out_cache->v.push_back(v.detach());
    }
    Tensor attn = ops::attention_masked(ops::split_heads(q, heads_), ops::split_heads(k, heads_),
                                        ops::split_heads(v, heads_), key_mask, Lc, true);
    x = ops::add(x, ops::linear(ops::merge_heads(attn), ly.attn.wo, ly.attn.bo));
    Tensor n2 = ops::layer_norm(x, ly.ln2.g, ly.ln2.b);
    x = ops::add(x, ffn_forward(ly.ffn, n2));
  }
  return x;
}

Tensor DecoderLM::final_norm(const Tensor& hidden) const {
  return ops::layer_norm(hidden, final_ln_.g, final_ln_.b);
}

Tensor DecoderLM::logits(const Tensor& hidden) const {
  return ops::linear(final_norm(hidden), head_w_, head_b_);
}

}  // namespace vikdf
