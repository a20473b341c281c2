// SPDX-License-Identifier: Apache-2.0
//
// Stage-1 objectives: text-image matching over knowledge vectors, masked
// image reconstruction, and masked token prediction.

#pragma once

#include "vikdf/iqformer.hpp"

namespace vikdf {

// Mean over the query axis then L2-normalized: [B, n, d] -> [B, d].
Tensor pooled_normalized(const Tensor& k);

// S[i][j] = max over query pairs (p, q) of dot(a[i,p,:], b[j,q,:]).
// Inputs are expected to hold unit rows; gradient flows only through the
// winning pair of each entry.
Tensor pairwise_max_cos(const Tensor& a, const Tensor& b);

// Symmetric InfoNCE between text- and image-derived knowledge at the
// learnable temperature. pooling: "mean" compares pooled bank vectors;
// "max_pairwise" scores a pair by its best query-to-query cosine.
Tensor loss_tim(const KnowledgeVectors& text_k, const KnowledgeVectors& image_k,
                const Temperature& temperature, const std::string& pooling);

// Mean absolute error over the pixels of masked patches. pred/target:
// [B, 3, S, S]; patch_mask: [B, P] over the patch grid, row-major.
Tensor loss_tamim(const Tensor& pred_image, const Tensor& target_image,
                  const BoolMask& patch_mask, std::int64_t patch_size);

// Mean cross entropy over masked token positions.
Tensor loss_iamtm(const Tensor& logits, const IdMatrix& targets, const BoolMask& token_mask);

}  // namespace vikdf
