// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary checkpoint: magic, format version, step, the run config
// as canonical text, named parameter tensors in registry order, optimizer
// moments, the data RNG state, and a trailing CRC-32. save -> load -> save
// reproduces the file byte for byte.

#pragma once

#include <cstdint>
#include <string>

#include "vikdf/model.hpp"
#include "vikdf/optim.hpp"

namespace vikdf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// CRC-32 (reflected, polynomial 0xEDB88320) — the checksum the checkpoint
// trailer uses; also handy as a short content digest elsewhere.
std::uint32_t crc32_bytes(const void* p, std::size_t n);

// opt may be null (e.g. export for inference); the file records whether
// optimizer state is present.
void save_checkpoint(const std::string& path, const VikdfModel& model, const AdamW* opt,
                     std::int64_t step, const Rng& data_rng);

// Embedded config of a checkpoint (magic, version, and checksum verified).
ModelConfig peek_checkpoint_config(const std::string& path);

// Restores parameters, optimizer moments, step counter, and data RNG state
// into a model whose architecture matches the embedded config. Refuses a
// file whose architecture fields or tensor shapes disagree with the model.
// opt may be null to skip optimizer state; passing one when the file has
// none is a contract error. Returns the stored step.
std::int64_t load_checkpoint(const std::string& path, VikdfModel& model, AdamW* opt,
                             Rng& data_rng);

}  // namespace vikdf
