// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operators. Every operator validates shapes
// explicitly (no silent broadcasting) and records an exact backprop
// closure on the output node.

#pragma once

#include "vikdf/tensor.hpp"

namespace vikdf::ops {

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);
Tensor exp_elem(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor gelu(const Tensor& x);
// out = x * s and out = x / s where s is a single-element tensor.
Tensor mul_scalar_tensor(const Tensor& x, const Tensor& s);
Tensor div_scalar_tensor(const Tensor& x, const Tensor& s);

// ---- shape -----------------------------------------------------------------

// x: [B, L, h*dh] -> [B, h, L, dh]
Tensor split_heads(const Tensor& x, std::int64_t heads);
// x: [B, h, L, dh] -> [B, L, h*dh]
Tensor merge_heads(const Tensor& x);
// Concatenate along dim 1; all other extents must match. Rank 3 only.
Tensor concat_dim1(const std::vector<Tensor>& parts);
// x: [B, L, d] -> [B, len, d] starting at `start`.
Tensor slice_dim1(const Tensor& x, std::int64_t start, std::int64_t len);
// x: [n, d] -> [B, n, d], copies per batch row; gradient sums over B.
Tensor broadcast_rows(const Tensor& x, std::int64_t batch);
// Copy reinterpretation; numel must match.
Tensor reshape(const Tensor& x, Shape s);
// x: [B, M, N] -> [B, N, M].
Tensor transpose_12(const Tensor& x);
// x: [B, L, d], idx: [B, n] row indices into dim 1 -> [B, n, d].
Tensor gather_rows(const Tensor& x, const IdMatrix& idx);

// ---- linear algebra --------------------------------------------------------

// a: [*, M, K], b: [K, N] or matching batched [*, K, N].
Tensor matmul(const Tensor& a, const Tensor& b);
// a: [*, M, K], b: [*, N, K]; contracts the trailing axis of both.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x: [..., d] plus bias [d].
Tensor add_bias(const Tensor& x, const Tensor& b);
// Linear layer helper: x [*, in] * w [in, out] + b [out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- normalization and attention -------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor softmax_lastdim(const Tensor& x);
// Softmax over the last axis with a key-validity mask [B, Lk] broadcast over
// heads and query positions, plus an optional causal constraint: query row q
// may attend keys k <= q + causal_offset. causal_offset < 0 disables the
// causal constraint. x: [B, h, Lq, Lk]. A row with no admissible key raises
// DegenerateMaskError; a query row whose own position is masked is exempted
// via self-attachment when allow_self is set.
Tensor masked_softmax(const Tensor& x, const BoolMask* key_mask, std::int64_t causal_offset,
                      bool allow_self = false);
// Full-mask variant; mask shape [B, Lq, Lk] broadcast over heads.
Tensor masked_softmax_full(const Tensor& x, const BoolMask& mask);
// q, k, v: [B, h, L*, dh]; optional full mask [B, Lq, Lk].
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const BoolMask* mask);
// Internal-path attention with key mask + causal offset semantics.
Tensor attention_masked(const Tensor& q, const Tensor& k, const Tensor& v,
                        const BoolMask* key_mask, std::int64_t causal_offset,
                        bool allow_self = false);

// ---- embeddings and reductions ---------------------------------------------

// table: [V, d], ids: [B, L] with 0 <= id < V.
Tensor embedding(const Tensor& table, const IdMatrix& ids);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// x: [B, n, d] -> [B, d].
Tensor mean_dim1(const Tensor& x);
// Row-wise x / ||x||2 over the last axis. Rows with norm <= min_norm raise
// NumericError.
Tensor l2_normalize_lastdim(const Tensor& x, double min_norm = 1e-150);

// ---- image layout ----------------------------------------------------------

// x: [B, C*r^2, H, W] -> [B, C, H*r, W*r] (also accepts rank 3, no batch).
Tensor pixel_shuffle(const Tensor& x, std::int64_t r);
// Inverse of pixel_shuffle.
Tensor pixel_unshuffle(const Tensor& x, std::int64_t r);
// x: [B, Cin, H, W], w: [Cout, Cin, kh, kw], b: [Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t stride,
              std::int64_t pad);

// ---- losses ----------------------------------------------------------------

// Symmetric InfoNCE over a square similarity-logit matrix [N, N]; matched
// pairs on the diagonal; plain sum over rows and columns.
Tensor info_nce_sym(const Tensor& logits);
// Mean absolute error between pred and target over positions where mask is
// true. target participates as a constant. Raises DegenerateMaskError when
// the mask selects nothing.
Tensor masked_mae(const Tensor& pred, const Tensor& target, const BoolMask& mask);
// Mean cross entropy of logits [B, L, V] against targets [B, L] over masked
// positions.
Tensor masked_cross_entropy(const Tensor& logits, const IdMatrix& targets, const BoolMask& mask);
// Mean of (a-b)^2 over all elements.
Tensor mse_mean(const Tensor& a, const Tensor& b);

}  // namespace vikdf::ops
