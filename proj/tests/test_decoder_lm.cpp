// SPDX-License-Identifier: Apache-2.0
//
// Frozen decoder language model: causality, cache equivalence, position
// handling, and the logits head.

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "vikdf/model.hpp"

using namespace vikdf;
using testutil::micro_cfg;

namespace {

IdMatrix ids_of(const std::vector<std::int32_t>& row) {
  return IdMatrix{1, static_cast<std::int64_t>(row.size()), row};
}

}  // namespace

TEST_CASE("decoder parameters are frozen") {
  VikdfModel m(micro_cfg());
  for (const auto& e : m.reg.entries())
    if (e.name.rfind("lm.", 0) == 0) {
      CHECK(e.frozen);
      CHECK_FALSE(e.tensor.requires_grad());
    }
}

TEST_CASE("embed and position lookup") {
  ModelConfig cfg = micro_cfg();
  VikdfModel m(cfg);
  IdMatrix ids = ids_of({'a', 'b'});
  Tensor emb = m.lm.embed_tokens(ids);
  CHECK(emb.shape() == Shape{1, 2, cfg.d_lm});
  CHECK_FALSE(emb.requires_grad());

  Tensor at0 = m.lm.add_positions(emb, 0);
  Tensor at3 = m.lm.add_positions(emb, 3);
  CHECK_FALSE(testutil::bits_equal(at0, at3));

  // offset past the table is refused
  CHECK_THROWS_AS(m.lm.add_positions(emb, m.lm.max_len() - 1), TruncationError);
  CHECK(m.lm.max_len() == cfg.max_lm_len);
  CHECK(m.lm.d_model() == cfg.d_lm);
}

TEST_CASE("causality: later tokens cannot influence earlier hidden states") {
  ModelConfig cfg = micro_cfg();
  VikdfModel m(cfg);
  std::vector<std::int32_t> row1 = {'h', 'e', 'l', 'l', 'o'};
  std::vector<std::int32_t> row2 = {'h', 'e', 'l', 'l', '!'};  // differs at the last position
  BoolMask keys = BoolMask::full({1, 5}, true);
  Tensor h1 = m.lm.forward(m.lm.add_positions(m.lm.embed_tokens(ids_of(row1)), 0), &keys,
                           nullptr, nullptr);
  Tensor h2 = m.lm.forward(m.lm.add_positions(m.lm.embed_tokens(ids_of(row2)), 0), &keys,
                           nullptr, nullptr);
  std::int64_t d = cfg.d_lm;
  for (std::int64_t l = 0; l < 4; ++l)
    for (std::int64_t j = 0; j < d; ++j)
      CHECK(h1.raw()[l * d + j] == h2.raw()[l * d + j]);
  bool last_differs = false;
  for (std::int64_t j = 0; j < d; ++j)
    last_differs = last_differs || h1.raw()[4 * d + j] != h2.raw()[4 * d + j];
  CHECK(last_differs);
}

TEST_CASE("prefix cache reproduces the full forward bit for bit") {
  ModelConfig cfg = micro_cfg();
  VikdfModel m(cfg);
  std::vector<std::int32_t> full = {'a', 'b', 'c', 'd', 'e', 'f'};
  BoolMask keys_full = BoolMask::full({1, 6}, true);
  Tensor h_full = m.lm.forward(m.lm.add_positions(m.lm.embed_tokens(ids_of(full)), 0),
                               &keys_full, nullptr, nullptr);

  // process the first 4 tokens, cache them, then run the 2-token suffix
  std::vector<std::int32_t> prefix(full.begin(), full.begin() + 4);
  std::vector<std::int32_t> suffix(full.begin() + 4, full.end());
  DecoderLM::Cache cache;
  BoolMask keys_pre = BoolMask::full({1, 4}, true);
  m.lm.forward(m.lm.add_positions(m.lm.embed_tokens(ids_of(prefix)), 0), &keys_pre, nullptr,
               &cache);
  CHECK(cache.len == 4);
  BoolMask keys_all = BoolMask::full({1, 6}, true);
  Tensor h_suffix = m.lm.forward(m.lm.add_positions(m.lm.embed_tokens(ids_of(suffix)), 4),
                                 &keys_all, &cache, nullptr);
  std::int64_t d = cfg.d_lm;
  REQUIRE(h_suffix.shape() == Shape{1, 2, d});
  for (std::int64_t l = 0; l < 2; ++l)
    for (std::int64_t j = 0; j < d; ++j)
      CHECK(h_suffix.raw()[l * d + j] == h_full.raw()[(4 + l) * d + j]);

  // chained caches extend correctly
  DecoderLM::Cache cache2;
  m.lm.forward(m.lm.add_positions(m.lm.embed_tokens(ids_of(suffix)), 4), &keys_all, &cache,
               &cache2);
  CHECK(cache2.len == 6);
}

TEST_CASE("cached tensors are constants") {
  VikdfModel m(micro_cfg());
  DecoderLM::Cache cache;
  BoolMask keys = BoolMask::full({1, 2}, true);
  m.lm.forward(m.lm.add_positions(m.lm.embed_tokens(ids_of({'a', 'b'})), 0), &keys, nullptr,
               &cache);
  for (const auto& t : cache.k) CHECK_FALSE(t.requires_grad());
  for (const auto& t : cache.v) CHECK_FALSE(t.requires_grad());
}

TEST_CASE("logits apply the final norm and head") {
  ModelConfig cfg = micro_cfg();
  VikdfModel m(cfg);
  BoolMask keys = BoolMask::full({1, 3}, true);
  Tensor h = m.lm.forward(m.lm.add_positions(m.lm.embed_tokens(ids_of({'a', 'b', 'c'})), 0),
                          &keys, nullptr, nullptr);
  Tensor lg = m.lm.logits(h);
  CHECK(lg.shape() == Shape{1, 3, tok::kVocabSize});

  // zeroing the head makes all logits identical (the uniform rig)
  VikdfModel rig(cfg);
  for (auto& e : rig.reg.entries())
    if (e.name == "lm.head_w" || e.name == "lm.head_b")
      for (std::size_t i = 0; i < e.tensor.numel(); ++i) e.tensor.raw()[i] = 0.0;
  Tensor h2 = rig.lm.forward(
      rig.lm.add_positions(rig.lm.embed_tokens(ids_of({'a', 'b', 'c'})), 0), &keys, nullptr,
      nullptr);
  Tensor lg2 = rig.lm.logits(h2);
  for (std::size_t i = 0; i < lg2.numel(); ++i) CHECK(lg2.raw()[i] == 0.0);
}
