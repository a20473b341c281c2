// SPDX-License-Identifier: Apache-2.0
//
// Synthetic image-text pairs with a controllable latent attribute, mask
// planning for the masked-modeling objectives, and corpus file I/O.
//
// Attribute a encodes color a % 4 (red, green, blue, yellow) and shape
// (a / 4) % 4 (circle, square, triangle, diamond). Images are a flat-colored
// shape over a textured gray background; the attribute is recoverable from
// pixels alone by a fixed decision rule, which grounds the transfer probe.

#pragma once

#include <string>
#include <vector>

#include "vikdf/rng.hpp"
#include "vikdf/tensor.hpp"

namespace vikdf {

struct PairSample {
  std::vector<double> image;  // planar [3, S, S], values in [0, 1]
  std::string caption;
  std::int64_t attribute = 0;
};

struct PairSet {
  std::int64_t image_size = 32;
  std::vector<PairSample> samples;
};

struct DialogueSample {
  std::string context;
  std::string response;
};

struct LabeledDialogue {
  DialogueSample dialogue;
  std::int64_t attribute = 0;
};

// Names for attribute components ("red", "circle", ...).
const std::string& color_name(std::int64_t attribute);
const std::string& shape_name(std::int64_t attribute);

// Deterministic synthetic corpus; attribute_count in [2, 16].
PairSet generate_synthetic_pairs(std::uint64_t seed, std::int64_t count,
                                 std::int64_t attribute_count, std::int64_t image_size);

// Deterministic synthetic dialogues whose contexts and responses name the
// attribute vocabulary.
std::vector<LabeledDialogue> generate_synthetic_dialogues(std::uint64_t seed, std::int64_t count,
                                                          std::int64_t attribute_count);

// Fixed pixel decision rule; recovers the attribute of a clean synthetic
// image exactly. Returns color + 4 * shape.
std::int64_t classify_attribute(const std::vector<double>& image, std::int64_t image_size);

// Permutation-test control: shuffles the attribute labels across samples.
// Images and captions keep their pairing, and no training objective reads
// the attribute field, so training is unchanged; only probe labels
// decorrelate from the content.
void shuffle_pair_attributes(PairSet& set, std::uint64_t seed);

// floor(ratio * patch_count) patches marked, uniform without replacement.
BoolMask mask_image_patches(std::int64_t patch_count, double ratio, Rng& rng);

// Zero-fills the pixels of masked patches of a planar [3, S, S] image.
std::vector<double> apply_patch_mask(const std::vector<double>& image, std::int64_t image_size,
                                     std::int64_t patch_size, const BoolMask& patch_mask);

struct TextMaskResult {
  std::vector<std::int32_t> masked;  // tokens with masked positions replaced by MASK
  std::vector<std::uint8_t> plan;    // 1 where masked
};
// Masks ceil(ratio * maskable) positions (at least one); only raw byte
// tokens are maskable — specials (BOS, PAD, MASK) never are.
TextMaskResult mask_text_tokens(const std::vector<std::int32_t>& tokens, double ratio, Rng& rng);

// Pair corpus: line-delimited records referencing a raw-f64 image sidecar.
void save_pairs(const PairSet& set, const std::string& records_path,
                const std::string& images_path);
PairSet load_pairs(const std::string& records_path, const std::string& images_path);

// Dialogue corpus: line-delimited {"context": ..., "response": ...} records.
void save_dialogue_corpus(const std::vector<DialogueSample>& samples, const std::string& path);
std::vector<DialogueSample> load_dialogue_corpus(const std::string& path);

// Byte-exact JSON string escaping used by the corpus writers (bytes above
// 0x7e and below 0x20 travel as \u00XX).
std::string json_escape(const std::string& s);

}  // namespace vikdf
