// SPDX-License-Identifier: Apache-2.0

#include "vikdf/distillation.hpp"

#include <cmath>
#include <limits>

#include "vikdf/kernels.hpp"
#include "vikdf/ops.hpp"

namespace vikdf {

Tensor pooled_normalized(const Tensor& k) {
  return ops::l2_normalize_lastdim(ops::mean_dim1(k));
}

Tensor pairwise_max_cos(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3)
    throw DimensionError("pairwise_max_cos: expected rank-3 banks, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  if (a.dim(2) != b.dim(2))
    throw DimensionError("pairwise_max_cos: feature dims differ: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  std::int64_t N = a.dim(0), na = a.dim(1);
  std::int64_t M = b.dim(0), nb = b.dim(1);
  std::int64_t d = a.dim(2);

  auto out = std::make_shared<TensorNode>();
  out->shape = {N, M};
  out->data.resize(static_cast<std::size_t>(N * M));
  auto argp = std::make_shared<std::vector<std::int32_t>>(out->data.size());
  auto argq = std::make_shared<std::vector<std::int32_t>>(out->data.size());
  const double* ad = a.raw();
  const double* bd = b.raw();
  for (std::int64_t i = 0; i < N; ++i)
    for (std::int64_t j = 0; j < M; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      std::int32_t bp = 0, bq = 0;
      for (std::int64_t p = 0; p < na; ++p)
        for (std::int64_t q = 0; q < nb; ++q) {
          double s = kern::dot(ad + (i * na + p) * d, bd + (j * nb + q) * d,
                               static_cast<std::size_t>(d));
          if (s > best) {
            best = s;
            bp = static_cast<std::int32_t>(p);
            bq = static_cast<std::int32_t>(q);
          }
        }
      std::size_t o = static_cast<std::size_t>(i * M + j);
      out->data[o] = best;
      (*argp)[o] = bp;
      (*argq)[o] = bq;
    }

  if (a.requires_grad() || b.requires_grad()) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    auto an = a.node(), bn = b.node();
    out->backprop = [an, bn, argp, argq, N, M, na, nb, d](TensorNode& n) {
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t j = 0; j < M; ++j) {
          std::size_t o = static_cast<std::size_t>(i * M + j);
          double g = n.grad[o];
          if (g == 0.0) continue;
          std::int64_t p = (*argp)[o], q = (*argq)[o];
          const double* arow = an->data.data() + (i * na + p) * d;
          const double* brow = bn->data.data() + (j * nb + q) * d;
          if (an->requires_grad) {
            double* ga = an->grad.data() + (i * na + p) * d;
            for (std::int64_t t = 0; t < d; ++t) ga[t] = std::fma(g, brow[t], ga[t]);
          }
          if (bn->requires_grad) {
            double* gb = bn->grad.data() + (j * nb + q) * d;
            for (std::int64_t t = 0; t < d; ++t) gb[t] = std::fma(g, arow[t], gb[t]);
          }
        }
    };
  }
  return Tensor(out);
}

Tensor loss_tim(const KnowledgeVectors& text_k, const KnowledgeVectors& image_k,
                const Temperature& temperature, const std::string& pooling) {
  bool forward_order = text_k.source == KnowledgeSource::FromText &&
                       image_k.source == KnowledgeSource::FromImage;
  bool swapped_order = text_k.source == KnowledgeSource::FromImage &&
                       image_k.source == KnowledgeSource::FromText;
  if (!forward_order && !swapped_order)
    throw ContractError("loss_tim: expects one text-derived and one image-derived bank");
  const Tensor& a = text_k.k;
  const Tensor& b = image_k.k;
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    throw DimensionError("loss_tim: banks must be [N,n,d] with matching N, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.dim(0) < 1) throw InputError("loss_tim: empty batch");
  Tensor sim;
  if (pooling == "mean") {
    sim = ops::matmul_nt(pooled_normalized(a), pooled_normalized(b));
  } else if (pooling == "max_pairwise") {
    sim = pairwise_max_cos(ops::l2_normalize_lastdim(a), ops::l2_normalize_lastdim(b));
  } else {
    throw InputError("loss_tim: unknown pooling '" + pooling + "'");
  }
  return ops::info_nce_sym(ops::div_scalar_tensor(sim, temperature.tau()));
}

Tensor loss_tamim(const Tensor& pred_image, const Tensor& target_image,
                  const BoolMask& patch_mask, std::int64_t patch_size) {
  if (pred_image.rank() != 4 || pred_image.dim(1) != 3 || pred_image.dim(2) != pred_image.dim(3))
    throw DimensionError("loss_tamim: expected images [B,3,S,S], got " +
                         shape_str(pred_image.shape()));
  if (pred_image.shape() != target_image.shape())
    throw DimensionError("loss_tamim: pred/target shapes differ: " + shape_str(pred_image.shape()) +
                         " vs " + shape_str(target_image.shape()));
  std::int64_t B = pred_image.dim(0), S = pred_image.dim(2);
  if (patch_size <= 0 || S % patch_size != 0)
    throw DimensionError("loss_tamim: patch size " + std::to_string(patch_size) +
                         " does not divide image side " + std::to_string(S));
  std::int64_t g = S / patch_size;
  if (patch_mask.shape != Shape{B, g * g})
    throw DimensionError("loss_tamim: patch mask must be [B," + std::to_string(g * g) +
                         "], got " + shape_str(patch_mask.shape));

  BoolMask pix = BoolMask::full(pred_image.shape(), false);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t y = 0; y < S; ++y)
      for (std::int64_t x = 0; x < S; ++x) {
        if (!patch_mask.at(static_cast<std::size_t>(b * g * g + (y / patch_size) * g +
                                                    x / patch_size)))
          continue;
        for (std::int64_t c = 0; c < 3; ++c)
          pix.v[static_cast<std::size_t>(((b * 3 + c) * S + y) * S + x)] = 1;
      }
  return ops::masked_mae(pred_image, target_image, pix);
}

Tensor loss_iamtm(const Tensor& logits, const IdMatrix& targets, const BoolMask& token_mask) {
  return ops::masked_cross_entropy(logits, targets, token_mask);
}

}  // namespace vikdf
