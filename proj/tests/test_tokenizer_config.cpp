// SPDX-License-Identifier: Apache-2.0
//
// Byte tokenizer contracts and run-configuration parsing/serialization.

#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "test_util.hpp"
#include "vikdf/config.hpp"
#include "vikdf/tokenizer.hpp"

using namespace vikdf;

TEST_CASE("byte tokenizer round-trips arbitrary bytes") {
  std::string text = "hello";
  text.push_back('\0');
  text.push_back(static_cast<char>(0xFF));
  text += " world";
  std::vector<std::int32_t> ids = ByteTokenizer::encode(text);
  REQUIRE(ids.size() == text.size());
  CHECK(ids[0] == 'h');
  CHECK(ids[5] == 0);
  CHECK(ids[6] == 0xFF);
  CHECK(ByteTokenizer::decode(ids) == text);

  std::vector<std::int32_t> bos = ByteTokenizer::encode_with_bos("ab");
  REQUIRE(bos.size() == 3);
  CHECK(bos[0] == tok::kBos);
  CHECK(bos[1] == 'a');

  // decode drops every special token
  CHECK(ByteTokenizer::decode({tok::kBos, 'h', tok::kMask, 'i', tok::kPad}) == "hi");
  CHECK(tok::kVocabSize == 259);
}

TEST_CASE("pad_batch pads to the longest row and masks validity") {
  std::vector<std::vector<std::int32_t>> rows = {{'a', 'b', 'c'}, {'x'}};
  ByteTokenizer::Batch b = ByteTokenizer::pad_batch(rows, 10, false);
  CHECK(b.ids.rows == 2);
  CHECK(b.ids.cols == 3);  // longest row, not max_len
  CHECK(b.ids.at(0, 2) == 'c');
  CHECK(b.ids.at(1, 0) == 'x');
  CHECK(b.ids.at(1, 1) == tok::kPad);
  CHECK(b.mask.at(2) == true);
  CHECK(b.mask.at(4) == false);

  CHECK_THROWS_AS(ByteTokenizer::pad_batch(rows, 2, false), TruncationError);
  ByteTokenizer::Batch clipped = ByteTokenizer::pad_batch(rows, 2, true);
  CHECK(clipped.ids.cols == 2);
  CHECK(clipped.ids.at(0, 1) == 'b');
}

TEST_CASE("config serialize and apply_text round-trip") {
  ModelConfig cfg = testutil::micro_cfg();
  cfg.lr = 0.00317;
  cfg.caption_prompt = "describe it";
  cfg.lr_decay = "cosine";
  cfg.shuffle_attributes = true;
  std::string text = cfg.serialize();

  ModelConfig back;
  back.apply_text(text);
  CHECK(back.serialize() == text);
  CHECK(back.lr == cfg.lr);
  CHECK(back.caption_prompt == "describe it");
  CHECK(back.shuffle_attributes == true);
  CHECK(back.d_enc == 16);
}

TEST_CASE("config rejects malformed input with parse errors") {
  ModelConfig cfg;
  CHECK_THROWS_AS(cfg.apply_assignment("no_such_key", "3"), ParseError);
  CHECK_THROWS_AS(cfg.apply_assignment("d_enc", "banana"), ParseError);
  CHECK_THROWS_AS(cfg.apply_assignment("lr", "fast"), ParseError);
  CHECK_THROWS_AS(cfg.apply_assignment("shuffle_attributes", "maybe"), ParseError);
  CHECK_THROWS_AS(cfg.apply_text("this line has no equals sign"), ParseError);
  // comments and blank lines are fine
  cfg.apply_text("# comment\n\nd_enc = 32\n");
  CHECK(cfg.d_enc == 32);
}

TEST_CASE("config validation catches inconsistent settings") {
  ModelConfig ok = testutil::micro_cfg();
  ok.validate();

  ModelConfig c1 = ok;
  c1.image_size = 26;  // not divisible by patch_size
  CHECK_THROWS_AS(c1.validate(), InputError);

  ModelConfig c2 = ok;
  c2.d_enc = 15;  // not divisible by heads
  CHECK_THROWS_AS(c2.validate(), InputError);

  ModelConfig c3 = ok;
  c3.pooling = "bogus";
  CHECK_THROWS_AS(c3.validate(), InputError);

  ModelConfig c4 = ok;
  c4.knowledge_readout = "bogus";
  CHECK_THROWS_AS(c4.validate(), InputError);

  ModelConfig c5 = ok;
  c5.objective_mode = "bogus";
  CHECK_THROWS_AS(c5.validate(), InputError);

  ModelConfig c6 = ok;
  c6.lr_decay = "bogus";
  CHECK_THROWS_AS(c6.validate(), InputError);

  ModelConfig c7 = ok;
  c7.total_steps = 0;
  CHECK_THROWS_AS(c7.validate(), InputError);

  ModelConfig c8 = ok;
  c8.mask_ratio_text = 1.5;
  CHECK_THROWS_AS(c8.validate(), InputError);
}

TEST_CASE("config file loading") {
  std::string path = "test_cfg_tmp.txt";
  {
    std::ofstream os(path, std::ios::trunc);
    os << "d_enc = 32\nenc_heads = 4\nlr = 0.5\n";
  }
  ModelConfig cfg = ModelConfig::from_file(path);
  CHECK(cfg.d_enc == 32);
  CHECK(cfg.lr == 0.5);
  std::remove(path.c_str());
  CHECK_THROWS_AS(ModelConfig::from_file("definitely_missing_file.cfg"), IoError);
}

TEST_CASE("presets validate") {
  ModelConfig::desk_preset().validate();
  ModelConfig::paper_preset().validate();
  CHECK(ModelConfig::paper_preset().d_enc > ModelConfig::desk_preset().d_enc);
}
