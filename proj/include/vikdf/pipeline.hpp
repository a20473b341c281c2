// SPDX-License-Identifier: Apache-2.0
//
// Training, inference, and probing: concurrent two-stage pretraining steps,
// text-only fine-tuning steps, autoregressive decoding on the frozen LM,
// knowledge textualization, and the attribute probe used for evaluation.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vikdf/data.hpp"
#include "vikdf/model.hpp"
#include "vikdf/optim.hpp"

namespace vikdf {

// Mutable training state: the model, its optimizer, the data-order RNG, and
// the number of completed optimizer steps. All of it round-trips through
// checkpoints.
struct TrainState {
  VikdfModel model;
  AdamW opt;
  Rng data_rng;
  std::int64_t step = 0;

  explicit TrainState(const ModelConfig& cfg)
      : model(cfg), opt(model.reg, model.cfg), data_rng(model.cfg.data_seed) {}

  // Key/value cache of the reconstruction prompt (frozen LM, so computed
  // once per process and reused every step).
  const DecoderLM::Cache* recon_prompt_cache();

 private:
  std::optional<DecoderLM::Cache> recon_cache_;
};

// One line of the deterministic train log. Disabled terms stay unset and
// are omitted from the serialized record; wall-clock timing is written to a
// separate sidecar so logs are bit-reproducible.
struct TrainLogRecord {
  std::int64_t step = 0;
  std::optional<double> tim, tamim, iamtm, kd;
  std::optional<double> iaci, iakr, ki;
  std::optional<double> nll;  // fine-tuning loss
  double lr = 0.0;
  std::optional<double> tau;
};
// One JSON object per line; key order fixed; doubles at full precision.
std::string format_log_record(const TrainLogRecord& r);

// The whole corpus in order when batch_size covers it, else batch_size
// uniform draws with replacement.
std::vector<std::int64_t> sample_batch_indices(std::int64_t corpus_size, std::int64_t batch_size,
                                               Rng& rng);

// One optimizer update on L_kd + L_ki over a sampled pair batch (the
// alternating objective mode optimizes the two sums on alternating steps).
TrainLogRecord pretrain_step(TrainState& st, const PairSet& corpus);

// One optimizer update of the text-only objective: mean NLL of each response
// conditioned on [soft prompts from distill_from_text(context); context].
TrainLogRecord finetune_step(TrainState& st, const std::vector<DialogueSample>& corpus);

struct DecodeOptions {
  std::string mode = "greedy";  // greedy | top_k
  std::int64_t top_k = 8;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::int64_t max_len = 64;
};

// Autoregressive decode of at most max_len tokens after [soft prompts from
// k; prompt]; stops at PAD or when positions run out. Greedy breaks ties
// toward the lowest id; top_k sampling is deterministic per seed.
std::vector<std::int32_t> decode_tokens(const VikdfModel& model, const KnowledgeVectors& k,
                                        const std::vector<std::int32_t>& prompt,
                                        const DecodeOptions& opt);

// Zero-resource response generation: knowledge comes from the context text
// itself; no image tensors exist anywhere in this path.
std::string infer_response(const VikdfModel& model, const std::string& context,
                           const DecodeOptions& opt);

// Decodes a description of the context's knowledge vectors: conditions on
// [soft prompts; caption prompt] instead of the context tokens.
std::string textualize_knowledge(const VikdfModel& model, const std::string& context,
                                 const DecodeOptions& opt);

// Token-weighted mean NLL of responses over a dialogue corpus under the
// fine-tuning formula (includes each row's terminal PAD target).
double corpus_nll(const VikdfModel& model, const std::vector<DialogueSample>& corpus,
                  std::int64_t batch_size);

// Mean knowledge-reconstruction error over a pair corpus (forward only).
double recon_error(const VikdfModel& model, const PairSet& corpus, std::int64_t batch_size);

struct ProbeReport {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

// Trains a softmax probe on flattened text knowledge vectors of the caption
// texts and reports accuracies. shuffle_labels permutes the training labels
// (the no-signal control); seed drives only that permutation.
ProbeReport attribute_probe(const VikdfModel& model, const PairSet& probe_train,
                            const PairSet& probe_test, std::int64_t classes, bool shuffle_labels,
                            std::uint64_t seed);

}  // namespace vikdf
