// SPDX-License-Identifier: Apache-2.0

#include "vikdf/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "vikdf/distillation.hpp"
#include "vikdf/integration.hpp"
#include "vikdf/ops.hpp"

namespace vikdf {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void append_field(std::string& out, const char* key, double v) {
  if (out.back() != '{') out += ',';
  out += '"';
  out += key;
  out += "\":";
  out += fmt_double(v);
}

void append_opt(std::string& out, const char* key, const std::optional<double>& v) {
  if (v) append_field(out, key, *v);
}

// Collects whatever term values exist into one diagnostic line.
std::string term_dump(const TrainLogRecord& r) {
  std::ostringstream ss;
  auto put = [&](const char* k, const std::optional<double>& v) {
    if (v) ss << ' ' << k << '=' << fmt_double(*v);
  };
  put("l_tim", r.tim);
  put("l_tamim", r.tamim);
  put("l_iamtm", r.iamtm);
  put("l_kd", r.kd);
  put("l_iaci", r.iaci);
  put("l_iakr", r.iakr);
  put("l_ki", r.ki);
  put("l_nll", r.nll);
  return ss.str();
}

void require_finite(const TrainLogRecord& r, std::int64_t step) {
  for (const auto* v : {&r.tim, &r.tamim, &r.iamtm, &r.kd, &r.iaci, &r.iakr, &r.ki, &r.nll})
    if (*v && !std::isfinite(**v))
      throw NumericError("non-finite loss at step " + std::to_string(step) + ":" + term_dump(r));
}

std::int32_t pick_token(const std::vector<double>& logits, const DecodeOptions& opt, Rng& rng) {
  std::int64_t v = static_cast<std::int64_t>(logits.size());
  if (opt.mode == "greedy") {
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < v; ++i)
      if (logits[static_cast<std::size_t>(i)] > logits[static_cast<std::size_t>(best)]) best = i;
    return static_cast<std::int32_t>(best);
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(v));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    double la = logits[static_cast<std::size_t>(a)], lb = logits[static_cast<std::size_t>(b)];
    return la != lb ? la > lb : a < b;
  });
  std::int64_t k = std::min<std::int64_t>(opt.top_k, v);
  double m = logits[static_cast<std::size_t>(order[0])];
  std::vector<double> w(static_cast<std::size_t>(k));
  double total = 0.0;
  for (std::int64_t i = 0; i < k; ++i) {
    double x = std::exp((logits[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] - m) /
                        opt.temperature);
    w[static_cast<std::size_t>(i)] = x;
    total += x;
  }
  double u = rng.uniform() * total;
  double cum = 0.0;
  for (std::int64_t i = 0; i < k; ++i) {
    cum += w[static_cast<std::size_t>(i)];
    if (u < cum) return static_cast<std::int32_t>(order[static_cast<std::size_t>(i)]);
  }
  return static_cast<std::int32_t>(order[static_cast<std::size_t>(k - 1)]);
}

// Builds [context; response; PAD] rows plus their target starts.
void dialogue_rows(const std::vector<DialogueSample>& corpus,
                   const std::vector<std::int64_t>& indices,
                   std::vector<std::vector<std::int32_t>>& rows,
                   std::vector<std::int64_t>& starts, std::vector<std::string>& contexts) {
  for (std::int64_t idx : indices) {
    if (idx < 0 || idx >= static_cast<std::int64_t>(corpus.size()))
      throw InputError("dialogue batch: index " + std::to_string(idx) + " out of range");
    const DialogueSample& d = corpus[static_cast<std::size_t>(idx)];
    if (d.context.empty()) throw InputError("dialogue batch: empty context");
    if (d.response.empty()) throw InputError("dialogue batch: empty response");
    std::vector<std::int32_t> row = ByteTokenizer::encode(d.context);
    starts.push_back(static_cast<std::int64_t>(row.size()));
    std::vector<std::int32_t> resp = ByteTokenizer::encode(d.response);
    row.insert(row.end(), resp.begin(), resp.end());
    row.push_back(tok::kPad);
    rows.push_back(std::move(row));
    contexts.push_back(d.context);
  }
}

}  // namespace

const DecoderLM::Cache* TrainState::recon_prompt_cache() {
  if (!recon_cache_) {
    std::vector<std::int32_t> rp = ByteTokenizer::encode(model.cfg.reconstruction_prompt);
    recon_cache_ = make_prompt_cache(model.lm, rp);
  }
  return &*recon_cache_;
}

std::string format_log_record(const TrainLogRecord& r) {
  std::string out = "{\"step\":" + std::to_string(r.step);
  append_opt(out, "l_tim", r.tim);
  append_opt(out, "l_tamim", r.tamim);
  append_opt(out, "l_iamtm", r.iamtm);
  append_opt(out, "l_kd", r.kd);
  append_opt(out, "l_iaci", r.iaci);
  append_opt(out, "l_iakr", r.iakr);
  append_opt(out, "l_ki", r.ki);
  append_opt(out, "l_nll", r.nll);
  append_field(out, "lr", r.lr);
  append_opt(out, "tau", r.tau);
  out += '}';
  return out;
}

std::vector<std::int64_t> sample_batch_indices(std::int64_t corpus_size, std::int64_t batch_size,
                                               Rng& rng) {
  if (corpus_size <= 0) throw InputError("batch sampling: empty corpus");
  if (batch_size <= 0) throw InputError("batch sampling: batch size must be positive");
  std::vector<std::int64_t> idx;
  if (batch_size >= corpus_size) {
    idx.resize(static_cast<std::size_t>(corpus_size));
    std::iota(idx.begin(), idx.end(), 0);
  } else {
    idx.reserve(static_cast<std::size_t>(batch_size));
    for (std::int64_t i = 0; i < batch_size; ++i)
      idx.push_back(static_cast<std::int64_t>(
          rng.uniform_int(static_cast<std::uint64_t>(corpus_size))));
  }
  return idx;
}

TrainLogRecord pretrain_step(TrainState& st, const PairSet& corpus) {
  VikdfModel& model = st.model;
  const ModelConfig& cfg = model.cfg;
  std::int64_t step = st.step + 1;
  bool do_kd = true, do_ki = true;
  if (cfg.objective_mode == "alternating") {
    do_kd = (step % 2) == 1;
    do_ki = !do_kd;
  } else if (cfg.objective_mode != "joint") {
    throw InputError("unknown objective_mode '" + cfg.objective_mode + "'");
  }

  model.reg.zero_grads();
  std::vector<std::int64_t> idx =
      sample_batch_indices(static_cast<std::int64_t>(corpus.samples.size()), cfg.batch_size,
                           st.data_rng);
  PairBatch batch = make_pair_batch(model, corpus, idx, st.data_rng);

  TextEncoding te = model.text_enc.encode(batch.enc_text.ids, batch.enc_text.mask);
  KnowledgeVectors kt = model.iq.distill_from_text(te);

  TrainLogRecord rec;
  rec.step = step;
  Tensor total;
  if (do_kd) {
    KnowledgeVectors ki = model.iq.distill_from_image(model.image_enc.encode(batch.images));
    KdTerms kd = compute_kd(model, batch, kt, ki);
    if (kd.tim) rec.tim = kd.tim->item();
    if (kd.tamim) rec.tamim = kd.tamim->item();
    if (kd.iamtm) rec.iamtm = kd.iamtm->item();
    rec.kd = kd.total.item();
    total = kd.total;
  }
  if (do_ki) {
    const DecoderLM::Cache* cache = cfg.disable_bvif ? nullptr : st.recon_prompt_cache();
    KiTerms ki = compute_ki(model, batch, kt, cache);
    if (ki.iaci) rec.iaci = ki.iaci->item();
    if (ki.iakr) rec.iakr = ki.iakr->item();
    rec.ki = ki.total.item();
    total = total.defined() ? ops::add(total, ki.total) : ki.total;
  }
  require_finite(rec, step);

  total.backward();
  rec.lr = lr_at_step(cfg, step);
  rec.tau = model.temperature.tau_value();
  st.opt.step(rec.lr);
  st.step = step;
  return rec;
}

TrainLogRecord finetune_step(TrainState& st, const std::vector<DialogueSample>& corpus) {
  VikdfModel& model = st.model;
  const ModelConfig& cfg = model.cfg;
  std::int64_t step = st.step + 1;

  model.reg.zero_grads();
  std::vector<std::int64_t> idx =
      sample_batch_indices(static_cast<std::int64_t>(corpus.size()), cfg.batch_size, st.data_rng);
  std::vector<std::vector<std::int32_t>> rows;
  std::vector<std::int64_t> starts;
  std::vector<std::string> contexts;
  dialogue_rows(corpus, idx, rows, starts, contexts);

  KnowledgeVectors k = model.knowledge_from_texts(contexts);
  ByteTokenizer::Batch b = ByteTokenizer::pad_batch(rows, cfg.max_lm_len, false);
  Tensor loss = loss_iaci(model.lm, model.proj, k, b, starts);

  TrainLogRecord rec;
  rec.step = step;
  rec.nll = loss.item();
  require_finite(rec, step);

  loss.backward();
  rec.lr = lr_at_step(cfg, step);
  st.opt.step(rec.lr);
  st.step = step;
  return rec;
}

std::vector<std::int32_t> decode_tokens(const VikdfModel& model, const KnowledgeVectors& k,
                                        const std::vector<std::int32_t>& prompt,
                                        const DecodeOptions& opt) {
  if (prompt.empty()) throw InputError("decode: empty prompt");
  if (opt.mode != "greedy" && opt.mode != "top_k")
    throw InputError("decode: unknown mode '" + opt.mode + "'");
  if (opt.mode == "top_k" && opt.top_k < 1) throw InputError("decode: top_k must be >= 1");
  if (opt.temperature <= 0.0) throw InputError("decode: temperature must be positive");
  if (opt.max_len < 1) throw InputError("decode: max_len must be >= 1");
  if (k.k.dim(0) != 1) throw ContractError("decode: expected a single knowledge batch row");

  const DecoderLM& lm = model.lm;
  std::int64_t n = k.k.dim(1);
  std::int64_t L = static_cast<std::int64_t>(prompt.size());
  if (n + L + 1 > lm.max_len())
    throw TruncationError("decode: prompt of " + std::to_string(L) + " tokens plus " +
                          std::to_string(n) + " soft prompts exceeds the decoder's " +
                          std::to_string(lm.max_len()) + " positions");

  Tensor soft = project_knowledge_to_llm(model.proj, k).detach();
  IdMatrix pids{1, L, std::vector<std::int32_t>(prompt.begin(), prompt.end())};
  Tensor emb = lm.add_positions(ops::concat_dim1({soft, lm.embed_tokens(pids)}), 0);
  BoolMask keys = BoolMask::full({1, n + L}, true);
  DecoderLM::Cache cache;
  Tensor hidden = lm.forward(emb, &keys, nullptr, &cache);
  Tensor lg = lm.logits(ops::slice_dim1(hidden, n + L - 1, 1));

  Rng rng(opt.seed);
  std::vector<std::int32_t> out;
  for (std::int64_t t = 0;; ++t) {
    std::vector<double> row(lg.data().begin(), lg.data().end());
    std::int32_t next = pick_token(row, opt, rng);
    if (next == tok::kPad) break;
    out.push_back(next);
    if (static_cast<std::int64_t>(out.size()) >= opt.max_len) break;
    std::int64_t pos = n + L + t;
    if (pos + 1 > lm.max_len()) break;  // position capacity exhausted
    IdMatrix one{1, 1, {next}};
    Tensor emb1 = lm.add_positions(lm.embed_tokens(one), pos);
    BoolMask keys1 = BoolMask::full({1, cache.len + 1}, true);
    DecoderLM::Cache next_cache;
    hidden = lm.forward(emb1, &keys1, &cache, &next_cache);
    cache = std::move(next_cache);
    lg = lm.logits(hidden);
  }
  return out;
}

std::string infer_response(const VikdfModel& model, const std::string& context,
                           const DecodeOptions& opt) {
  if (context.empty()) throw InputError("infer: empty context");
  KnowledgeVectors k = model.knowledge_from_texts({context});
  return ByteTokenizer::decode(decode_tokens(model, k, ByteTokenizer::encode(context), opt));
}

std::string textualize_knowledge(const VikdfModel& model, const std::string& context,
                                 const DecodeOptions& opt) {
  if (context.empty()) throw InputError("textualize: empty context");
  KnowledgeVectors k = model.knowledge_from_texts({context});
  return ByteTokenizer::decode(
      decode_tokens(model, k, ByteTokenizer::encode(model.cfg.caption_prompt), opt));
}

double corpus_nll(const VikdfModel& model, const std::vector<DialogueSample>& corpus,
                  std::int64_t batch_size) {
  if (corpus.empty()) throw InputError("corpus NLL: empty corpus");
  if (batch_size <= 0) throw InputError("corpus NLL: batch size must be positive");
  double total = 0.0;
  std::int64_t tokens = 0;
  for (std::size_t begin = 0; begin < corpus.size(); begin += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(corpus.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<std::int64_t> idx;
    for (std::size_t i = begin; i < end; ++i) idx.push_back(static_cast<std::int64_t>(i));
    std::vector<std::vector<std::int32_t>> rows;
    std::vector<std::int64_t> starts;
    std::vector<std::string> contexts;
    dialogue_rows(corpus, idx, rows, starts, contexts);
    std::int64_t batch_tokens = 0;
    for (std::size_t i = 0; i < rows.size(); ++i)
      batch_tokens += static_cast<std::int64_t>(rows[i].size()) - starts[i];
    KnowledgeVectors k = model.knowledge_from_texts(contexts);
    ByteTokenizer::Batch b = ByteTokenizer::pad_batch(rows, model.cfg.max_lm_len, false);
    double mean_nll = loss_iaci(model.lm, model.proj, k, b, starts).item();
    total += mean_nll * static_cast<double>(batch_tokens);
    tokens += batch_tokens;
  }
  return total / static_cast<double>(tokens);
}

double recon_error(const VikdfModel& model, const PairSet& corpus, std::int64_t batch_size) {
  if (corpus.samples.empty()) throw InputError("reconstruction error: empty corpus");
  if (batch_size <= 0) throw InputError("reconstruction error: batch size must be positive");
  const ModelConfig& cfg = model.cfg;
  std::vector<std::int32_t> rp = ByteTokenizer::encode(cfg.reconstruction_prompt);
  DecoderLM::Cache prompt_cache = make_prompt_cache(model.lm, rp);
  double total = 0.0;
  std::int64_t count = 0;
  for (std::size_t begin = 0; begin < corpus.samples.size();
       begin += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(corpus.samples.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<std::vector<std::int32_t>> enc_rows, cap_rows;
    std::vector<std::string> texts;
    for (std::size_t i = begin; i < end; ++i) {
      const PairSample& s = corpus.samples[i];
      enc_rows.push_back(ByteTokenizer::encode_with_bos(s.caption));
      cap_rows.push_back(ByteTokenizer::encode(s.caption));
    }
    ByteTokenizer::Batch enc = ByteTokenizer::pad_batch(enc_rows, cfg.max_text_len, false);
    KnowledgeVectors kt = model.iq.distill_from_text(model.text_enc.encode(enc.ids, enc.mask));
    ByteTokenizer::Batch caps = ByteTokenizer::pad_batch(cap_rows, cfg.max_lm_len, false);
    KnowledgeVectors khat = reconstruct_knowledge(model.lm, model.proj, caps, rp,
                                                  cfg.knowledge_readout, &prompt_cache);
    double v = loss_iakr(kt, khat).item();
    std::int64_t b = static_cast<std::int64_t>(end - begin);
    total += v * static_cast<double>(b);
    count += b;
  }
  return total / static_cast<double>(count);
}

ProbeReport attribute_probe(const VikdfModel& model, const PairSet& probe_train,
                            const PairSet& probe_test, std::int64_t classes, bool shuffle_labels,
                            std::uint64_t seed) {
  if (classes < 2) throw InputError("probe: need at least two classes");
  auto features = [&](const PairSet& set) {
    if (set.samples.empty()) throw InputError("probe: empty corpus");
    std::vector<std::string> caps;
    caps.reserve(set.samples.size());
    for (const auto& s : set.samples) caps.push_back(s.caption);
    Tensor k = model.knowledge_from_texts(caps).k.detach();
    std::int64_t B = k.dim(0);
    return ops::reshape(k, {B, 1, k.dim(1) * k.dim(2)});
  };
  auto labels = [&](const PairSet& set) {
    std::vector<std::int32_t> y;
    for (const auto& s : set.samples) {
      if (s.attribute < 0 || s.attribute >= classes)
        throw InputError("probe: attribute " + std::to_string(s.attribute) + " outside " +
                         std::to_string(classes) + " classes");
      y.push_back(static_cast<std::int32_t>(s.attribute));
    }
    return y;
  };

  Tensor train_x = features(probe_train);
  Tensor test_x = features(probe_test);
  std::vector<std::int32_t> train_y = labels(probe_train);
  std::vector<std::int32_t> test_y = labels(probe_test);
  if (shuffle_labels) {
    Rng r(seed);
    r.shuffle(train_y.data(), train_y.size());
  }

  std::int64_t F = train_x.dim(2);
  ParamRegistry preg;
  Tensor w = preg.add("probe.w", init_zeros({F, classes}), false);
  Tensor b = preg.add("probe.b", init_zeros({classes}), false);

  ModelConfig pcfg;
  pcfg.weight_decay = 0.0;
  pcfg.grad_clip = 0.0;
  AdamW popt(preg, pcfg);

  std::int64_t Btr = train_x.dim(0);
  IdMatrix ty{Btr, 1, train_y};
  BoolMask all = BoolMask::full({Btr, 1}, true);
  const std::int64_t steps = 300;
  const double lr = 0.1;
  for (std::int64_t s = 0; s < steps; ++s) {
    preg.zero_grads();
    Tensor logits = ops::linear(train_x, w, b);
    Tensor loss = ops::masked_cross_entropy(logits, ty, all);
    loss.backward();
    popt.step(lr);
  }

  auto accuracy = [&](const Tensor& x, const std::vector<std::int32_t>& y) {
    Tensor logits = ops::linear(x, w, b);
    std::int64_t B = logits.dim(0);
    std::int64_t correct = 0;
    for (std::int64_t i = 0; i < B; ++i) {
      const double* row = logits.raw() + i * classes;
      std::int64_t best = 0;
      for (std::int64_t c = 1; c < classes; ++c)
        if (row[c] > row[best]) best = c;
      if (best == y[static_cast<std::size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(B);
  };

  return ProbeReport{accuracy(train_x, train_y), accuracy(test_x, test_y)};
}

}  // namespace vikdf
