// SPDX-License-Identifier: Apache-2.0
//
// Parameter registry and the pre-norm transformer building blocks shared by
// the text/image encoders, the query transformer, and the decoder LM.

#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vikdf/ops.hpp"
#include "vikdf/rng.hpp"
#include "vikdf/tensor.hpp"

namespace vikdf {

// Ordered, named parameter store. Insertion order is the canonical order for
// the optimizer and for checkpoint serialization. Frozen parameters never
// require gradients; gradients still flow through the ops that consume them.
class ParamRegistry {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool frozen;
  };

  Tensor add(const std::string& name, Tensor t, bool frozen) {
    if (index_.count(name)) throw ContractError("parameter '" + name + "' registered twice");
    t.set_requires_grad(!frozen);
    index_[name] = entries_.size();
    entries_.push_back({name, t, frozen});
    return t;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  const Entry* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second];
  }
  Entry* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second];
  }

  std::size_t size() const { return entries_.size(); }
  void zero_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Initializers. All weights come from the run RNG in construction order, so
// a (seed, config) pair fully determines the initial model.
Tensor init_normal(Rng& rng, Shape s, double stddev);
Tensor init_zeros(Shape s);
Tensor init_ones(Shape s);
// Linear weight [in, out] at std 1/sqrt(in).
Tensor init_linear_weight(Rng& rng, std::int64_t in, std::int64_t out);

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  std::int64_t heads = 1;
};

// Registers q/k/v/o projections mapping model_d queries and kv_d keys/values
// into model_d outputs.
AttentionWeights make_attention(ParamRegistry& reg, Rng& rng, const std::string& prefix,
                                std::int64_t model_d, std::int64_t kv_d, std::int64_t heads,
                                bool frozen);

struct LayerNormWeights {
  Tensor g, b;
};
LayerNormWeights make_layer_norm(ParamRegistry& reg, Rng& rng, const std::string& prefix,
                                 std::int64_t d, bool frozen);

struct FfnWeights {
  Tensor w1, b1, w2, b2;
};
FfnWeights make_ffn(ParamRegistry& reg, Rng& rng, const std::string& prefix, std::int64_t d,
                    std::int64_t mult, bool frozen);

// Attention over x (queries) and kv (keys/values), with an optional key
// validity mask and causal offset (see ops::masked_softmax).
Tensor attention_forward(const AttentionWeights& w, const Tensor& x, const Tensor& kv,
                         const BoolMask* key_mask, std::int64_t causal_offset, bool allow_self);
Tensor ffn_forward(const FfnWeights& w, const Tensor& x);

// Pre-norm self-attention + FFN layer.
struct EncoderLayer {
  LayerNormWeights ln1, ln2;
  AttentionWeights attn;
  FfnWeights ffn;
};
EncoderLayer make_encoder_layer(ParamRegistry& reg, Rng& rng, const std::string& prefix,
                                std::int64_t d, std::int64_t heads, std::int64_t ffn_mult,
                                bool frozen);
Tensor encoder_layer_forward(const EncoderLayer& l, const Tensor& x, const BoolMask* key_mask,
                             std::int64_t causal_offset, bool allow_self);

// Pre-norm self-attention + cross-attention + FFN layer (query transformer).
struct CrossLayer {
  LayerNormWeights ln_self, ln_cross, ln_ffn;
  AttentionWeights self_attn, cross_attn;
  FfnWeights ffn;
};
CrossLayer make_cross_layer(ParamRegistry& reg, Rng& rng, const std::string& prefix,
                            std::int64_t d, std::int64_t kv_d, std::int64_t heads,
                            std::int64_t ffn_mult, bool frozen);
Tensor cross_layer_forward(const CrossLayer& l, const Tensor& x, const Tensor& kv,
                           const BoolMask* kv_mask);

}  // namespace vikdf
