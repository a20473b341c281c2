// SPDX-License-Identifier: Apache-2.0
//
// Byte-level tokenizer. Ids 0..255 are raw bytes; three specials follow.
// PAD doubles as the end-of-sequence marker during decoding: generation
// stops when the model emits it.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vikdf/tensor.hpp"

namespace vikdf {

namespace tok {
constexpr std::int32_t kPad = 256;
constexpr std::int32_t kBos = 257;
constexpr std::int32_t kMask = 258;
constexpr std::int32_t kVocabSize = 259;
}  // namespace tok

class ByteTokenizer {
 public:
  // Bytes of `text` as ids; no specials added.
  static std::vector<std::int32_t> encode(const std::string& text);
  // BOS followed by the bytes of `text`.
  static std::vector<std::int32_t> encode_with_bos(const std::string& text);
  // Drops specials, maps byte ids back to bytes.
  static std::string decode(const std::vector<std::int32_t>& ids);

  // Pads (or rejects over-length) token rows into a fixed [B, L] id matrix
  // plus the validity mask. Rows longer than max_len raise TruncationError
  // unless allow_truncate is set, in which case they are clipped.
  struct Batch {
    IdMatrix ids;
    BoolMask mask;
  };
  static Batch pad_batch(const std::vector<std::vector<std::int32_t>>& rows, std::int64_t max_len,
                         bool allow_truncate);
};

}  // namespace vikdf
