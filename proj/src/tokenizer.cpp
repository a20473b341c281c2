// SPDX-License-Identifier: Apache-2.0

#include "vikdf/tokenizer.hpp"

#include <algorithm>

namespace vikdf {

std::vector<std::int32_t> ByteTokenizer::encode(const std::string& text) {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c));
  return ids;
}

std::vector<std::int32_t> ByteTokenizer::encode_with_bos(const std::string& text) {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size() + 1);
  ids.push_back(tok::kBos);
  for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c));
  return ids;
}

std::string ByteTokenizer::decode(const std::vector<std::int32_t>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (std::int32_t id : ids) {
    if (id < 0 || id >= tok::kVocabSize)
      throw InputError("decode: id " + std::to_string(id) + " outside vocabulary");
    if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

ByteTokenizer::Batch ByteTokenizer::pad_batch(const std::vector<std::vector<std::int32_t>>& rows,
                                              std::int64_t max_len, bool allow_truncate) {
  if (rows.empty()) throw InputError("pad_batch: empty batch");
  std::int64_t longest = 0;
  for (const auto& r : rows)
    longest = std::max<std::int64_t>(longest, static_cast<std::int64_t>(r.size()));
  if (longest > max_len) {
    if (!allow_truncate)
      throw TruncationError("pad_batch: sequence length " + std::to_string(longest) +
                            " exceeds maximum " + std::to_string(max_len));
    longest = max_len;
  }
  if (longest == 0) throw InputError("pad_batch: all rows empty");
  std::int64_t B = static_cast<std::int64_t>(rows.size());
  Batch batch{IdMatrix::zeros(B, longest), BoolMask::full({B, longest}, false)};
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& r = rows[static_cast<std::size_t>(b)];
    std::int64_t n = std::min<std::int64_t>(static_cast<std::int64_t>(r.size()), longest);
    for (std::int64_t i = 0; i < n; ++i) {
      std::int32_t id = r[static_cast<std::size_t>(i)];
      if (id < 0 || id >= tok::kVocabSize)
        throw InputError("pad_batch: id " + std::to_string(id) + " outside vocabulary");
      batch.ids.at(b, i) = id;
      batch.mask.v[static_cast<std::size_t>(b * longest + i)] = 1;
    }
    for (std::int64_t i = n; i < longest; ++i) batch.ids.at(b, i) = tok::kPad;
  }
  return batch;
}

}  // namespace vikdf
