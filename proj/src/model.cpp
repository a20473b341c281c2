// SPDX-License-Identifier: Apache-2.0

#include "vikdf/model.hpp"

#include <cmath>

#include "vikdf/ops.hpp"

namespace vikdf {

namespace {

const ModelConfig& validated(const ModelConfig& c) {
  c.validate();
  return c;
}

}  // namespace

VikdfModel::VikdfModel(const ModelConfig& c)
    : cfg(validated(c)),
      init_rng(cfg.seed),
      text_enc(reg, init_rng, cfg),
      image_enc(reg, init_rng, cfg),
      iq(reg, init_rng, cfg),
      temperature(reg, cfg.tau_init),
      image_fuser(reg, init_rng, "image_fuser", cfg.d_enc, cfg.d_k, cfg.d_fuse, cfg.iq_heads,
                  cfg.enc_ffn_mult, KnowledgeSource::FromText),
      img_head(reg, init_rng, cfg),
      text_fuser(reg, init_rng, "text_fuser", cfg.d_enc, cfg.d_k, cfg.d_fuse, cfg.iq_heads,
                 cfg.enc_ffn_mult, KnowledgeSource::FromImage),
      txt_head(reg, init_rng, cfg),
      lm(reg, init_rng, cfg),
      proj(reg, init_rng, cfg) {}

KnowledgeVectors VikdfModel::knowledge_from_texts(const std::vector<std::string>& texts) const {
  std::vector<std::vector<std::int32_t>> rows;
  rows.reserve(texts.size());
  for (const auto& t : texts) {
    if (t.empty()) throw InputError("knowledge_from_texts: empty text");
    rows.push_back(ByteTokenizer::encode_with_bos(t));
  }
  ByteTokenizer::Batch b = ByteTokenizer::pad_batch(rows, cfg.max_text_len, false);
  return iq.distill_from_text(text_enc.encode(b.ids, b.mask));
}

PairBatch make_pair_batch(const VikdfModel& model, const PairSet& corpus,
                          const std::vector<std::int64_t>& indices, Rng& rng) {
  const ModelConfig& cfg = model.cfg;
  if (indices.empty()) throw InputError("make_pair_batch: empty index list");
  if (corpus.image_size != cfg.image_size)
    throw DimensionError("make_pair_batch: corpus image size " + std::to_string(corpus.image_size) +
                         " does not match config " + std::to_string(cfg.image_size));
  std::int64_t B = static_cast<std::int64_t>(indices.size());
  std::int64_t S = cfg.image_size;
  std::int64_t P = cfg.patch_count();

  PairBatch batch;
  batch.image_mask = BoolMask::full({B, P}, false);
  std::vector<double> images(static_cast<std::size_t>(B * 3 * S * S));
  std::vector<double> masked(images.size());
  std::vector<std::vector<std::int32_t>> enc_rows, enc_rows_masked, lm_rows, recon_rows;
  std::vector<std::vector<std::uint8_t>> plans;
  std::vector<std::int32_t> prompt = ByteTokenizer::encode(cfg.caption_prompt);
  if (prompt.empty()) throw InputError("make_pair_batch: empty caption prompt");

  for (std::int64_t b = 0; b < B; ++b) {
    std::int64_t idx = indices[static_cast<std::size_t>(b)];
    if (idx < 0 || idx >= static_cast<std::int64_t>(corpus.samples.size()))
      throw InputError("make_pair_batch: sample index " + std::to_string(idx) + " out of range");
    const PairSample& s = corpus.samples[static_cast<std::size_t>(idx)];
    if (s.caption.empty()) throw InputError("make_pair_batch: empty caption in corpus");

    BoolMask pm = mask_image_patches(P, cfg.mask_ratio_image, rng);
    for (std::int64_t p = 0; p < P; ++p)
      batch.image_mask.v[static_cast<std::size_t>(b * P + p)] = pm.v[static_cast<std::size_t>(p)];
    std::copy(s.image.begin(), s.image.end(),
              images.begin() + static_cast<std::ptrdiff_t>(b * 3 * S * S));
    std::vector<double> mimg = apply_patch_mask(s.image, S, cfg.patch_size, pm);
    std::copy(mimg.begin(), mimg.end(), masked.begin() + static_cast<std::ptrdiff_t>(b * 3 * S * S));

    std::vector<std::int32_t> enc_row = ByteTokenizer::encode_with_bos(s.caption);
    TextMaskResult tm = mask_text_tokens(enc_row, cfg.mask_ratio_text, rng);
    enc_rows.push_back(enc_row);
    enc_rows_masked.push_back(tm.masked);
    plans.push_back(tm.plan);

    std::vector<std::int32_t> caption = ByteTokenizer::encode(s.caption);
    std::vector<std::int32_t> lm_row = prompt;
    lm_row.insert(lm_row.end(), caption.begin(), caption.end());
    lm_row.push_back(tok::kPad);
    lm_rows.push_back(std::move(lm_row));
    batch.lm_target_start.push_back(static_cast<std::int64_t>(prompt.size()));
    recon_rows.push_back(std::move(caption));
    batch.attributes.push_back(s.attribute);
  }

  batch.images = Tensor::from_vector({B, 3, S, S}, std::move(images));
  batch.masked_images = Tensor::from_vector({B, 3, S, S}, std::move(masked));
  batch.enc_text = ByteTokenizer::pad_batch(enc_rows, cfg.max_text_len, false);
  batch.enc_text_masked = ByteTokenizer::pad_batch(enc_rows_masked, cfg.max_text_len, false);
  std::int64_t Le = batch.enc_text.ids.cols;
  batch.text_mask_plan = BoolMask::full({B, Le}, false);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < plans[static_cast<std::size_t>(b)].size(); ++j)
      batch.text_mask_plan.v[static_cast<std::size_t>(b * Le) + j] =
          plans[static_cast<std::size_t>(b)][j];
  batch.lm_rows = ByteTokenizer::pad_batch(lm_rows, cfg.max_lm_len, false);
  batch.recon_text = ByteTokenizer::pad_batch(recon_rows, cfg.max_lm_len, false);
  return batch;
}

KdTerms compute_kd(const VikdfModel& model, const PairBatch& batch, const KnowledgeVectors& kt,
                   const KnowledgeVectors& ki) {
  const ModelConfig& cfg = model.cfg;
  KdTerms out;
  std::vector<Tensor> weighted;

  if (!cfg.disable_tim) {
    out.tim = loss_tim(kt, ki, model.temperature, cfg.pooling);
    weighted.push_back(ops::scale(*out.tim, cfg.lambda_tim));
  }
  if (!cfg.disable_tamim) {
    ImageEncoding masked_feats = model.image_enc.encode(batch.masked_images);
    Tensor fused = model.image_fuser.fuse(masked_feats.hidden, kt);
    Tensor pred = model.img_head.decode(fused);
    out.tamim = loss_tamim(pred, batch.images, batch.image_mask, cfg.patch_size);
    weighted.push_back(ops::scale(*out.tamim, cfg.lambda_tamim));
  }
  if (!cfg.disable_iamtm) {
    TextEncoding masked_feats =
        model.text_enc.encode(batch.enc_text_masked.ids, batch.enc_text_masked.mask);
    Tensor fused = model.text_fuser.fuse(masked_feats.hidden, ki);
    Tensor logits = model.txt_head.predict(fused);
    out.iamtm = loss_iamtm(logits, batch.enc_text.ids, batch.text_mask_plan);
    weighted.push_back(ops::scale(*out.iamtm, cfg.lambda_iamtm));
  }
  if (weighted.empty()) throw ContractError("compute_kd: all stage-1 terms disabled");
  out.total = weighted[0];
  for (std::size_t i = 1; i < weighted.size(); ++i) out.total = ops::add(out.total, weighted[i]);
  return out;
}

KiTerms compute_ki(const VikdfModel& model, const PairBatch& batch, const KnowledgeVectors& kt,
                   const DecoderLM::Cache* prompt_cache_b1) {
  const ModelConfig& cfg = model.cfg;
  KiTerms out;
  out.iaci = loss_iaci(model.lm, model.proj, kt, batch.lm_rows, batch.lm_target_start);
  out.total = ops::scale(*out.iaci, cfg.lambda_iaci);
  if (!cfg.disable_bvif) {
    std::vector<std::int32_t> rp = ByteTokenizer::encode(cfg.reconstruction_prompt);
    KnowledgeVectors khat = reconstruct_knowledge(model.lm, model.proj, batch.recon_text, rp,
                                                  cfg.knowledge_readout, prompt_cache_b1);
    out.iakr = loss_iakr(kt, khat);
    out.total = ops::add(out.total, ops::scale(*out.iakr, cfg.lambda_iakr));
  }
  return out;
}

}  // namespace vikdf
