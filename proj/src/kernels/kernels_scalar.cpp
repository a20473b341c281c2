// SPDX-License-Identifier: Apache-2.0
//
// Scalar reference kernels. These define the numeric contract; the SIMD
// variants must match them bit for bit.

#include "vikdf/kernels.hpp"

#include <cmath>

namespace vikdf::kern {
namespace {

void s_add(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void s_sub(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void s_mul(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void s_scale(const double* a, double s, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * s;
}

void s_axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

// 4-lane blocked reduction, lane l owns indices i % 4 == l.
double s_dot(const double* a, const double* b, std::size_t n) {
  double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
  std::size_t n4 = n & ~std::size_t{3};
  for (std::size_t i = 0; i < n4; i += 4) {
    acc0 = std::fma(a[i + 0], b[i + 0], acc0);
    acc1 = std::fma(a[i + 1], b[i + 1], acc1);
    acc2 = std::fma(a[i + 2], b[i + 2], acc2);
    acc3 = std::fma(a[i + 3], b[i + 3], acc3);
  }
  double acc = (acc0 + acc1) + (acc2 + acc3);
  for (std::size_t i = n4; i < n; ++i) acc = std::fma(a[i], b[i], acc);
  return acc;
}

double s_sum(const double* a, std::size_t n) {
  double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
  std::size_t n4 = n & ~std::size_t{3};
  for (std::size_t i = 0; i < n4; i += 4) {
    acc0 += a[i + 0];
    acc1 += a[i + 1];
    acc2 += a[i + 2];
    acc3 += a[i + 3];
  }
  double acc = (acc0 + acc1) + (acc2 + acc3);
  for (std::size_t i = n4; i < n; ++i) acc += a[i];
  return acc;
}

double s_max(const double* a, std::size_t n) {
  double m = a[0];
  for (std::size_t i = 1; i < n; ++i)
    if (a[i] > m) m = a[i];
  return m;
}

// C[i,j] accumulates A[i,k]*B[k,j] with an fma chain in increasing k.
void s_gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * ldc;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    const double* arow = a + i * lda;
    for (std::size_t p = 0; p < k; ++p) {
      double aik = arow[p];
      const double* brow = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) crow[j] = std::fma(aik, brow[j], crow[j]);
    }
  }
}

// C[i,j] accumulates dot(A row i, B row j) with the 4-lane blocked order.
void s_gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  std::size_t k4 = k & ~std::size_t{3};
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * lda;
    double* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * ldb;
      double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
      for (std::size_t p = 0; p < k4; p += 4) {
        acc0 = std::fma(arow[p + 0], brow[p + 0], acc0);
        acc1 = std::fma(arow[p + 1], brow[p + 1], acc1);
        acc2 = std::fma(arow[p + 2], brow[p + 2], acc2);
        acc3 = std::fma(arow[p + 3], brow[p + 3], acc3);
      }
      double acc = (acc0 + acc1) + (acc2 + acc3);
      for (std::size_t p = k4; p < k; ++p) acc = std::fma(arow[p], brow[p], acc);
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

// C[i,j] accumulates A[k,i]*B[k,j]; k is the outer loop so the per-element
// chain again walks k in increasing order.
void s_gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * lda;
    const double* brow = b + p * ldb;
    for (std::size_t i = 0; i < m; ++i) {
      double aki = arow[i];
      double* crow = c + i * ldc;
      for (std::size_t j = 0; j < n; ++j) crow[j] = std::fma(aki, brow[j], crow[j]);
    }
  }
}

}  // namespace

const Ops& scalar_ops() {
  static const Ops table = {
      "scalar", s_add, s_sub, s_mul, s_scale, s_axpy, s_dot, s_sum, s_max,
      s_gemm_nn, s_gemm_nt, s_gemm_tn,
  };
  return table;
}

}  // namespace vikdf::kern
