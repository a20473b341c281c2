// SPDX-License-Identifier: Apache-2.0
//
// Automatic dialogue evaluation: perplexity, BLEU-1, ROUGE-L, embedding
// Average/Extrema/Greedy, and distinct n-grams. Counting metrics work on
// whitespace-split words; embedding metrics work on byte tokens resolved in
// a vocab-indexed table (by default the frozen text encoder's embeddings).

#pragma once

#include <string>
#include <vector>

#include "vikdf/data.hpp"
#include "vikdf/model.hpp"
#include "vikdf/pipeline.hpp"

namespace vikdf {

std::vector<std::string> split_words(const std::string& text);

// Corpus-level clipped unigram precision times the brevity penalty
// exp(1 - r/c) when the candidate corpus is shorter than the reference.
double bleu1(const std::vector<std::vector<std::string>>& candidates,
             const std::vector<std::vector<std::string>>& references);

inline constexpr double kRougeBeta2 = 1.44;  // beta = 1.2, recall-weighted

// Mean per-sample LCS F-measure: (1+b2)PR / (R + b2 P), zero when LCS is 0.
double rouge_l(const std::vector<std::vector<std::string>>& candidates,
               const std::vector<std::vector<std::string>>& references);

// Distinct n-grams across the corpus over total n-grams, n in {1, 2}.
// Texts shorter than n contribute nothing; a corpus with no n-grams at all
// is degenerate.
double distinct_n(const std::vector<std::vector<std::string>>& texts, int n);

struct EmbeddingScores {
  double average = 0.0;
  double extrema = 0.0;
  double greedy = 0.0;
};

// table: [V, d] token embeddings. All scores are cosines reported through
// the (1+cos)/2 map into [0, 1]; empty token lists score a neutral cosine
// of zero. Out-of-range token ids raise an input error naming the id.
EmbeddingScores embedding_metrics(const std::vector<std::vector<std::int32_t>>& candidates,
                                  const std::vector<std::vector<std::int32_t>>& references,
                                  const Tensor& table);

// exp of the token-weighted mean response NLL under the fine-tuning formula.
double perplexity(const VikdfModel& model, const std::vector<DialogueSample>& corpus,
                  std::int64_t batch_size);

struct EvalReport {
  std::int64_t samples = 0;
  double ppl = 0.0;
  double bleu_1 = 0.0;
  double rouge_l = 0.0;
  double emb_average = 0.0;
  double emb_extrema = 0.0;
  double emb_greedy = 0.0;
  double dis1 = 0.0;
  double dis2 = 0.0;
  std::string config_digest;  // CRC-32 of the serialized config, hex

  struct SampleRow {
    std::int64_t index = 0;
    std::string candidate;
    double rouge_l = 0.0;
    double emb_greedy = 0.0;
  };
  std::vector<SampleRow> per_sample;
};

// Generates a response per context with the given decode options, then
// scores generations against the references.
EvalReport evaluate(const VikdfModel& model, const std::vector<DialogueSample>& corpus,
                    const DecodeOptions& decode);

// One `key = value` record per metric, with the reporting conventions
// (cosine map, ROUGE beta) spelled out so numbers are self-describing.
std::string format_eval_report(const EvalReport& r);

}  // namespace vikdf
