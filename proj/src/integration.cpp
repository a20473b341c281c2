// SPDX-License-Identifier: Apache-2.0

#include "vikdf/integration.hpp"

#include "vikdf/ops.hpp"

namespace vikdf {

namespace {

IdMatrix replicate_ids(const std::vector<std::int32_t>& ids, std::int64_t batch) {
  IdMatrix m = IdMatrix::zeros(batch, static_cast<std::int64_t>(ids.size()));
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < ids.size(); ++j) m.at(b, static_cast<std::int64_t>(j)) = ids[j];
  return m;
}

void check_rows_nonempty(const ByteTokenizer::Batch& text, const char* where) {
  for (std::int64_t b = 0; b < text.ids.rows; ++b) {
    bool any = false;
    for (std::int64_t j = 0; j < text.ids.cols && !any; ++j)
      any = text.mask.at(static_cast<std::size_t>(b * text.ids.cols + j));
    if (!any) throw InputError(std::string(where) + ": text row " + std::to_string(b) + " is empty");
  }
}

}  // namespace

KnowledgeProjector::KnowledgeProjector(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg) {
  in_w_ = reg.add("integration.in_w", init_linear_weight(rng, cfg.d_k, cfg.d_lm), false);
  in_b_ = reg.add("integration.in_b", init_zeros({cfg.d_lm}), false);
  out_w_ = reg.add("integration.out_w", init_linear_weight(rng, cfg.d_lm, cfg.d_k), false);
  out_b_ = reg.add("integration.out_b", init_zeros({cfg.d_k}), false);
  slots_ = reg.add("integration.slots", init_normal(rng, {cfg.n_queries, cfg.d_lm}, 1.0), false);
}

Tensor KnowledgeProjector::from_decoder_hidden(const Tensor& h) const {
  return ops::linear(h, out_w_, out_b_);
}

Tensor project_knowledge_to_llm(const KnowledgeProjector& proj, const KnowledgeVectors& k) {
  if (k.source != KnowledgeSource::FromText)
    throw ContractError("project_knowledge_to_llm: the decoder only accepts text-derived knowledge");
  if (k.k.rank() != 3)
    throw DimensionError("project_knowledge_to_llm: expected [B,n,d_k], got " +
                         shape_str(k.k.shape()));
  return ops::linear(k.k, proj.in_w(), proj.in_b());
}

Tensor loss_iaci(const DecoderLM& lm, const KnowledgeProjector& proj, const KnowledgeVectors& k,
                 const ByteTokenizer::Batch& rows, const std::vector<std::int64_t>& target_start) {
  check_rows_nonempty(rows, "loss_iaci");
  std::int64_t B = rows.ids.rows, L = rows.ids.cols;
  if (static_cast<std::int64_t>(target_start.size()) != B)
    throw DimensionError("loss_iaci: target_start size " + std::to_string(target_start.size()) +
                         " does not match batch " + std::to_string(B));

  Tensor soft = project_knowledge_to_llm(proj, k);
  if (soft.dim(0) != B)
    throw DimensionError("loss_iaci: knowledge batch " + std::to_string(soft.dim(0)) +
                         " does not match text batch " + std::to_string(B));
  std::int64_t n = soft.dim(1);

  BoolMask targets = BoolMask::full({B, L}, false);
  for (std::int64_t b = 0; b < B; ++b) {
    if (target_start[b] < 1 || target_start[b] > L)
      throw InputError("loss_iaci: target_start " + std::to_string(target_start[b]) +
                       " of row " + std::to_string(b) + " outside [1," + std::to_string(L) + "]");
    bool any = false;
    for (std::int64_t j = target_start[b]; j < L; ++j)
      if (rows.mask.v[static_cast<std::size_t>(b * L + j)]) {
        targets.v[static_cast<std::size_t>(b * L + j)] = 1;
        any = true;
      }
    if (!any) throw InputError("loss_iaci: row " + std::to_string(b) + " has no target tokens");
  }

  Tensor emb = lm.add_positions(ops::concat_dim1({soft, lm.embed_tokens(rows.ids)}), 0);

  BoolMask keys = BoolMask::full({B, n + L}, true);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t j = 0; j < L; ++j)
      keys.v[static_cast<std::size_t>(b * (n + L) + n + j)] =
          rows.mask.v[static_cast<std::size_t>(b * L + j)];

  Tensor hidden = lm.forward(emb, &keys, nullptr, nullptr);
  Tensor logits = lm.logits(ops::slice_dim1(hidden, n - 1, L));
  return ops::masked_cross_entropy(logits, rows.ids, targets);
}

DecoderLM::Cache make_prompt_cache(const DecoderLM& lm,
                                   const std::vector<std::int32_t>& prompt_ids) {
  if (prompt_ids.empty()) throw InputError("make_prompt_cache: empty prompt");
  DecoderLM::Cache cache;
  Tensor emb = lm.add_positions(lm.embed_tokens(replicate_ids(prompt_ids, 1)), 0);
  lm.forward(emb, nullptr, nullptr, &cache);
  return cache;
}

DecoderLM::Cache replicate_cache(const DecoderLM::Cache& cache, std::int64_t batch) {
  DecoderLM::Cache out;
  out.len = cache.len;
  for (std::size_t l = 0; l < cache.k.size(); ++l) {
    if (cache.k[l].dim(0) != 1)
      throw ContractError("replicate_cache: expected a batch-1 cache");
    Shape flat{cache.k[l].dim(1), cache.k[l].dim(2)};
    out.k.push_back(ops::broadcast_rows(ops::reshape(cache.k[l], flat), batch));
    out.v.push_back(ops::broadcast_rows(ops::reshape(cache.v[l], flat), batch));
  }
  return out;
}

KnowledgeVectors reconstruct_knowledge(const DecoderLM& lm, const KnowledgeProjector& proj,
                                       const ByteTokenizer::Batch& text,
                                       const std::vector<std::int32_t>& prompt_ids,
                                       const std::string& readout,
                                       const DecoderLM::Cache* prompt_cache_b1) {
  check_rows_nonempty(text, "reconstruct_knowledge");
  std::int64_t B = text.ids.rows, Lt = text.ids.cols;
  std::int64_t n = proj.slots().dim(0);

  DecoderLM::Cache base =
      prompt_cache_b1 ? *prompt_cache_b1 : make_prompt_cache(lm, prompt_ids);
  std::int64_t m = base.len;
  DecoderLM::Cache cache = replicate_cache(base, B);

  bool use_slots;
  if (readout == "slots")
    use_slots = true;
  else if (readout == "last_tokens")
    use_slots = false;
  else
    throw InputError("reconstruct_knowledge: unknown readout '" + readout + "'");

  Tensor suffix = lm.embed_tokens(text.ids);
  std::int64_t Ls = Lt;
  if (use_slots) {
    suffix = ops::concat_dim1({suffix, ops::broadcast_rows(proj.slots(), B)});
    Ls += n;
  }
  suffix = lm.add_positions(suffix, m);

  BoolMask keys = BoolMask::full({B, m + Ls}, true);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t j = 0; j < Lt; ++j)
      keys.v[static_cast<std::size_t>(b * (m + Ls) + m + j)] =
          text.mask.v[static_cast<std::size_t>(b * Lt + j)];

  Tensor hidden = lm.forward(suffix, &keys, &cache, nullptr);

  Tensor picked;
  if (use_slots) {
    picked = ops::slice_dim1(hidden, Lt, n);
  } else {
    IdMatrix idx = IdMatrix::zeros(B, n);
    for (std::int64_t b = 0; b < B; ++b) {
      std::int64_t valid = 0;
      for (std::int64_t j = 0; j < Lt; ++j)
        if (text.mask.v[static_cast<std::size_t>(b * Lt + j)]) ++valid;
      if (valid < n)
        throw InputError("reconstruct_knowledge: row " + std::to_string(b) + " has " +
                         std::to_string(valid) + " tokens but last-token readout needs " +
                         std::to_string(n));
      for (std::int64_t j = 0; j < n; ++j)
        idx.at(b, j) = static_cast<std::int32_t>(valid - n + j);
    }
    picked = ops::gather_rows(hidden, idx);
  }
  return KnowledgeVectors{proj.from_decoder_hidden(lm.final_norm(picked)),
                          KnowledgeSource::Reconstructed};
}

Tensor loss_iakr(const KnowledgeVectors& k, const KnowledgeVectors& k_hat) {
  if (k.source != KnowledgeSource::FromText)
    throw ContractError("loss_iakr: original knowledge must be text-derived");
  if (k_hat.source != KnowledgeSource::Reconstructed)
    throw ContractError("loss_iakr: k_hat must come from reconstruct_knowledge");
  if (k.k.shape() != k_hat.k.shape())
    throw DimensionError("loss_iakr: shapes differ: " + shape_str(k.k.shape()) + " vs " +
                         shape_str(k_hat.k.shape()));
  return ops::mse_mean(k.k, k_hat.k);
}

}  // namespace vikdf
