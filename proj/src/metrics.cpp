// SPDX-License-Identifier: Apache-2.0

#include "vikdf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "vikdf/checkpoint.hpp"

namespace vikdf {

namespace {

void check_corpora(std::size_t c, std::size_t r, const char* what) {
  if (c == 0) throw InputError(std::string(what) + ": empty candidate corpus");
  if (c != r)
    throw InputError(std::string(what) + ": " + std::to_string(c) + " candidates vs " +
                     std::to_string(r) + " references");
}

std::size_t lcs_len(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::size_t n = a.size(), m = b.size();
  std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[m];
}

double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot = std::fma(u[i], v[i], dot);
    nu = std::fma(u[i], u[i], nu);
    nv = std::fma(v[i], v[i], nv);
  }
  if (nu == 0.0 || nv == 0.0) return 0.0;
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) words.push_back(w);
  return words;
}

double bleu1(const std::vector<std::vector<std::string>>& candidates,
             const std::vector<std::vector<std::string>>& references) {
  check_corpora(candidates.size(), references.size(), "bleu1");
  std::size_t clipped = 0, cand_total = 0, ref_total = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    std::map<std::string, std::size_t> cand_counts, ref_counts;
    for (const auto& w : candidates[i]) ++cand_counts[w];
    for (const auto& w : references[i]) ++ref_counts[w];
    for (const auto& [w, c] : cand_counts) {
      auto it = ref_counts.find(w);
      if (it != ref_counts.end()) clipped += std::min(c, it->second);
    }
    cand_total += candidates[i].size();
    ref_total += references[i].size();
  }
  if (cand_total == 0) return 0.0;
  double precision = static_cast<double>(clipped) / static_cast<double>(cand_total);
  double bp = cand_total >= ref_total
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(ref_total) / static_cast<double>(cand_total));
  return bp * precision;
}

double rouge_l(const std::vector<std::vector<std::string>>& candidates,
               const std::vector<std::vector<std::string>>& references) {
  check_corpora(candidates.size(), references.size(), "rouge_l");
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    std::size_t l = lcs_len(candidates[i], references[i]);
    if (l == 0 || candidates[i].empty() || references[i].empty()) continue;
    double p = static_cast<double>(l) / static_cast<double>(candidates[i].size());
    double r = static_cast<double>(l) / static_cast<double>(references[i].size());
    total += (1.0 + kRougeBeta2) * p * r / (r + kRougeBeta2 * p);
  }
  return total / static_cast<double>(candidates.size());
}

double distinct_n(const std::vector<std::vector<std::string>>& texts, int n) {
  if (n != 1 && n != 2) throw InputError("distinct_n: n must be 1 or 2");
  if (texts.empty()) throw InputError("distinct_n: empty corpus");
  std::set<std::string> distinct;
  std::size_t total = 0;
  for (const auto& t : texts) {
    if (t.size() < static_cast<std::size_t>(n)) continue;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t.size(); ++i) {
      std::string gram = t[i];
      for (int j = 1; j < n; ++j) {
        gram += '\x1f';
        gram += t[i + static_cast<std::size_t>(j)];
      }
      distinct.insert(std::move(gram));
      ++total;
    }
  }
  if (total == 0)
    throw DegenerateMaskError("distinct_n: no " + std::to_string(n) + "-grams in corpus");
  return static_cast<double>(distinct.size()) / static_cast<double>(total);
}

EmbeddingScores embedding_metrics(const std::vector<std::vector<std::int32_t>>& candidates,
                                  const std::vector<std::vector<std::int32_t>>& references,
                                  const Tensor& table) {
  check_corpora(candidates.size(), references.size(), "embedding_metrics");
  if (table.rank() != 2) throw DimensionError("embedding_metrics: table must be [V, d]");
  std::int64_t v = table.dim(0), d = table.dim(1);
  for (std::size_t i = 0; i < table.numel(); ++i)
    if (!std::isfinite(table.raw()[i]))
      throw NumericError("embedding_metrics: non-finite table entry");

  auto row = [&](std::int32_t id) {
    if (id < 0 || id >= v)
      throw InputError("embedding_metrics: token " + std::to_string(id) +
                       " not resolvable in a " + std::to_string(v) + "-row table");
    const double* p = table.raw() + static_cast<std::int64_t>(id) * d;
    return std::vector<double>(p, p + d);
  };
  auto mean_vec = [&](const std::vector<std::int32_t>& toks) {
    std::vector<double> m(static_cast<std::size_t>(d), 0.0);
    if (toks.empty()) return m;
    for (std::int32_t id : toks) {
      std::vector<double> r = row(id);
      for (std::int64_t j = 0; j < d; ++j) m[static_cast<std::size_t>(j)] += r[static_cast<std::size_t>(j)];
    }
    for (auto& x : m) x /= static_cast<double>(toks.size());
    return m;
  };
  auto extrema_vec = [&](const std::vector<std::int32_t>& toks) {
    std::vector<double> e(static_cast<std::size_t>(d), 0.0);
    for (std::int32_t id : toks) {
      std::vector<double> r = row(id);
      for (std::int64_t j = 0; j < d; ++j) {
        auto k = static_cast<std::size_t>(j);
        if (std::abs(r[k]) > std::abs(e[k])) e[k] = r[k];
      }
    }
    return e;
  };
  auto greedy_dir = [&](const std::vector<std::int32_t>& from, const std::vector<std::int32_t>& to) {
    if (from.empty() || to.empty()) return 0.0;
    double sum = 0.0;
    for (std::int32_t a : from) {
      std::vector<double> ra = row(a);
      double best = -2.0;
      for (std::int32_t b : to) best = std::max(best, cosine(ra, row(b)));
      sum += best;
    }
    return sum / static_cast<double>(from.size());
  };

  double avg = 0.0, ext = 0.0, grd = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    avg += cosine(mean_vec(candidates[i]), mean_vec(references[i]));
    ext += cosine(extrema_vec(candidates[i]), extrema_vec(references[i]));
    grd += 0.5 * (greedy_dir(candidates[i], references[i]) +
                  greedy_dir(references[i], candidates[i]));
  }
  double count = static_cast<double>(candidates.size());
  return EmbeddingScores{(1.0 + avg / count) / 2.0, (1.0 + ext / count) / 2.0,
                         (1.0 + grd / count) / 2.0};
}

double perplexity(const VikdfModel& model, const std::vector<DialogueSample>& corpus,
                  std::int64_t batch_size) {
  return std::exp(corpus_nll(model, corpus, batch_size));
}

EvalReport evaluate(const VikdfModel& model, const std::vector<DialogueSample>& corpus,
                    const DecodeOptions& decode) {
  if (corpus.empty()) throw InputError("evaluate: empty corpus");
  EvalReport rep;
  rep.samples = static_cast<std::int64_t>(corpus.size());
  char digest[12];
  std::string cfg_text = model.cfg.serialize();
  std::snprintf(digest, sizeof(digest), "%08X", crc32_bytes(cfg_text.data(), cfg_text.size()));
  rep.config_digest = digest;

  std::vector<std::vector<std::string>> cand_words, ref_words;
  std::vector<std::vector<std::int32_t>> cand_toks, ref_toks;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::string cand = infer_response(model, corpus[i].context, decode);
    cand_words.push_back(split_words(cand));
    ref_words.push_back(split_words(corpus[i].response));
    cand_toks.push_back(ByteTokenizer::encode(cand));
    ref_toks.push_back(ByteTokenizer::encode(corpus[i].response));
    rep.per_sample.push_back({static_cast<std::int64_t>(i), cand, 0.0, 0.0});
  }

  rep.ppl = perplexity(model, corpus, model.cfg.batch_size);
  rep.bleu_1 = bleu1(cand_words, ref_words);
  rep.rouge_l = rouge_l(cand_words, ref_words);
  const Tensor& table = model.text_enc.token_table();
  EmbeddingScores emb = embedding_metrics(cand_toks, ref_toks, table);
  rep.emb_average = emb.average;
  rep.emb_extrema = emb.extrema;
  rep.emb_greedy = emb.greedy;
  rep.dis1 = distinct_n(cand_words, 1);
  rep.dis2 = distinct_n(cand_words, 2);

  for (std::size_t i = 0; i < corpus.size(); ++i) {
    rep.per_sample[i].rouge_l = rouge_l({cand_words[i]}, {ref_words[i]});
    rep.per_sample[i].emb_greedy =
        embedding_metrics({cand_toks[i]}, {ref_toks[i]}, table).greedy;
  }
  return rep;
}

std::string format_eval_report(const EvalReport& r) {
  std::ostringstream ss;
  ss << "samples = " << r.samples << '\n';
  ss << "config_crc32 = " << r.config_digest << '\n';
  ss << "cosine_map = (1+cos)/2\n";
  ss << "rouge_beta2 = " << fmt_double(kRougeBeta2) << '\n';
  ss << "ppl = " << fmt_double(r.ppl) << '\n';
  ss << "bleu1 = " << fmt_double(r.bleu_1) << '\n';
  ss << "rouge_l = " << fmt_double(r.rouge_l) << '\n';
  ss << "emb_average = " << fmt_double(r.emb_average) << '\n';
  ss << "emb_extrema = " << fmt_double(r.emb_extrema) << '\n';
  ss << "emb_greedy = " << fmt_double(r.emb_greedy) << '\n';
  ss << "dis1 = " << fmt_double(r.dis1) << '\n';
  ss << "dis2 = " << fmt_double(r.dis2) << '\n';
  return ss.str();
}

}  // namespace vikdf
