// SPDX-License-Identifier: Apache-2.0

#include "vikdf/transformer.hpp"

#include <cmath>

namespace vikdf {

Tensor init_normal(Rng& rng, Shape s, double stddev) {
  Tensor t = Tensor::zeros(std::move(s));
  double* v = t.raw();
  for (std::size_t i = 0; i < t.numel(); ++i) v[i] = rng.normal(0.0, stddev);
  return t;
}

Tensor init_zeros(Shape s) { return Tensor::zeros(std::move(s)); }

Tensor init_ones(Shape s) { return Tensor::full(std::move(s), 1.0); }

Tensor init_linear_weight(Rng& rng, std::int64_t in, std::int64_t out) {
  return init_normal(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
}

AttentionWeights make_attention(ParamRegistry& reg, Rng& rng, const std::string& prefix,
                                std::int64_t model_d, std::int64_t kv_d, std::int64_t heads,
                                bool frozen) {
  AttentionWeights w;
  w.heads = heads;
  w.wq = reg.add(prefix + ".wq", init_linear_weight(rng, model_d, model_d), frozen);
  w.bq = reg.add(prefix + ".bq", init_zeros({model_d}), frozen);
  w.wk = reg.add(prefix + ".wk", init_linear_weight(rng, kv_d, model_d), frozen);
  w.bk = reg.add(prefix + ".bk", init_zeros({model_d}), frozen);
  w.wv = reg.add(prefix + ".wv", init_linear_weight(rng, kv_d, model_d), frozen);
  w.bv = reg.add(prefix + ".bv", init_zeros({model_d}), frozen);
  w.wo = reg.add(prefix + ".wo", init_linear_weight(rng, model_d, model_d), frozen);
  w.bo = reg.add(prefix + ".bo", init_zeros({model_d}), frozen);
  return w;
}

LayerNormWeights make_layer_norm(ParamRegistry& reg, Rng& rng, const std::string& prefix,
                                 std::int64_t d, bool frozen) {
  (void)rng;
  LayerNormWeights w;
  w.g = reg.add(prefix + ".g", init_ones({d}), frozen);
  w.b = reg.add(prefix + ".b", init_zeros({d}), frozen);
  return w;
}

FfnWeights make_ffn(ParamRegistry& reg, Rng& rng, const std::string& prefix, std::int64_t d,
                    std::int64_t mult, bool frozen) {
  FfnWeights w;
  w.w1 = reg.add(prefix + ".w1", init_linear_weight(rng, d, d * mult), frozen);
  w.b1 = reg.add(prefix + ".b1", init_zeros({d * mult}), frozen);
  w.w2 = reg.add(prefix + ".w2", init_linear_weight(rng, d * mult, d), frozen);
  w.b2 = reg.add(prefix + ".b2", init_zeros({d}), frozen);
  return w;
}

Tensor attention_forward(const AttentionWeights& w, const Tensor& x, const Tensor& kv,
                         const BoolMask* key_mask, std::int64_t causal_offset, bool allow_self) {
  Tensor q = ops::split_heads(ops::linear(x, w.wq, w.bq), w.heads);
  Tensor k = ops::split_heads(ops::linear(kv, w.wk, w.bk), w.heads);
  Tensor v = ops::split_heads(ops::linear(kv, w.wv, w.bv), w.heads);
  Tensor att = ops::attention_masked(q, k, v, key_mask, causal_offset, allow_self);
  return ops::linear(ops::merge_heads(att), w.wo, w.bo);
}

Tensor ffn_forward(const FfnWeights& w, const Tensor& x) {
  return ops::linear(ops::gelu(ops::linear(x, w.w1, w.b1)), w.w2, w.b2);
}

EncoderLayer make_encoder_layer(ParamRegistry& reg, Rng& rng, const std::string& prefix,
                                std::int64_t d, std::int64_t heads, std::int64_t ffn_mult,
                                bool frozen) {
  EncoderLayer l;
  l.ln1 = make_layer_norm(reg, rng, prefix + ".ln1", d, frozen);
  l.attn = make_attention(reg, rng, prefix + ".attn", d, d, heads, frozen);
  l.ln2 = make_layer_norm(reg, rng, prefix + ".ln2", d, frozen);
  l.ffn = make_ffn(reg, rng, prefix + ".ffn", d, ffn_mult, frozen);
  return l;
}

Tensor encoder_layer_forward(const EncoderLayer& l, const Tensor& x, const BoolMask* key_mask,
                             std::int64_t causal_offset, bool allow_self) {
  Tensor n1 = ops::layer_norm(x, l.ln1.g, l.ln1.b);
  Tensor h = ops::add(x, attention_forward(l.attn, n1, n1, key_mask, causal_offset, allow_self));
  Tensor n2 = ops::layer_norm(h, l.ln2.g, l.ln2.b);
  return ops::add(h, ffn_forward(l.ffn, n2));
}

CrossLayer make_cross_layer(ParamRegistry& reg, Rng& rng, const std::string& prefix,
                            std::int64_t d, std::int64_t kv_d, std::int64_t heads,
                            std::int64_t ffn_mult, bool frozen) {
  CrossLayer l;
  l.ln_self = make_layer_norm(reg, rng, prefix + ".ln_self", d, frozen);
  l.self_attn = make_attention(reg, rng, prefix + ".self", d, d, heads, frozen);
  l.ln_cross = make_layer_norm(reg, rng, prefix + ".ln_cross", d, frozen);
  l.cross_attn = make_attention(reg, rng, prefix + ".cross", d, kv_d, heads, frozen);
  l.ln_ffn = make_layer_norm(reg, rng, prefix + ".ln_ffn", d, frozen);
  l.ffn = make_ffn(reg, rng, prefix + ".ffn", d, ffn_mult, frozen);
  return l;
}

Tensor cross_layer_forward(const CrossLayer& l, const Tensor& x, const Tensor& kv,
                           const BoolMask* kv_mask) {
  Tensor n1 = ops::layer_norm(x, l.ln_self.g, l.ln_self.b);
  Tensor h = ops::add(x, attention_forward(l.self_attn, n1, n1, nullptr, -1, false));
  Tensor n2 = ops::layer_norm(h, l.ln_cross.g, l.ln_cross.b);
  h = ops::add(h, attention_forward(l.cross_attn, n2, kv, kv_mask, -1, false));
  Tensor n3 = ops::layer_norm(h, l.ln_ffn.g, l.ln_ffn.b);
  return ops::add(h, ffn_forward(l.ffn, n3));
}

}  // namespace vikdf
