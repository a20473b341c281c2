// SPDX-License-Identifier: Apache-2.0
//
// AVX2 kernel variants. Compiled with -mavx2 -mfma in its own translation
// unit; only reached after a runtime CPU check. Accumulation orders mirror
// the scalar reference exactly, so results are bit-identical.

#include "vikdf/kernels.hpp"

#if defined(VIKDF_KERNELS_AVX2)

#include <immintrin.h>

#include <cmath>

namespace vikdf::kern {
namespace {

void v_add(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void v_sub(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void v_mul(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void v_scale(const double* a, double s, double* out, std::size_t n) {
  __m256d sv = _mm256_set1_pd(s);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), sv));
  for (; i < n; ++i) out[i] = a[i] * s;
}

void v_axpy(double alpha, const double* x, double* y, std::size_t n) {
  __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

// Combine a 4-lane accumulator as (l0+l1)+(l2+l3), matching the scalar
// reference reduction order.
inline double hcombine(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  double l0 = _mm_cvtsd_f64(lo);
  double l1 = _mm_cvtsd_f64(_mm_unpackhi_pd(lo, lo));
  double l2 = _mm_cvtsd_f64(hi);
  double l3 = _mm_cvtsd_f64(_mm_unpackhi_pd(hi, hi));
  return (l0 + l1) + (l2 + l3);
}

double v_dot(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t n4 = n & ~std::size_t{3};
  for (std::size_t i = 0; i < n4; i += 4)
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
  double r = hcombine(acc);
  for (std::size_t i = n4; i < n; ++i) r = std::fma(a[i], b[i], r);
  return r;
}

double v_sum(const double* a, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t n4 = n & ~std::size_t{3};
  for (std::size_t i = 0; i < n4; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(a + i));
  double r = hcombine(acc);
  for (std::size_t i = n4; i < n; ++i) r += a[i];
  return r;
}

double v_max(const double* a, std::size_t n) {
  if (n < 8) {
    double m = a[0];
    for (std::size_t i = 1; i < n; ++i)
      if (a[i] > m) m = a[i];
    return m;
  }
  __m256d mv = _mm256_loadu_pd(a);
  std::size_t n4 = n & ~std::size_t{3};
  for (std::size_t i = 4; i < n4; i += 4) mv = _mm256_max_pd(mv, _mm256_loadu_pd(a + i));
  double t[4];
  _mm256_storeu_pd(t, mv);
  double m = t[0];
  for (int l = 1; l < 4; ++l)
    if (t[l] > m) m = t[l];
  for (std::size_t i = n4; i < n; ++i)
    if (a[i] > m) m = a[i];
  return m;
}

// One C row, 16 columns held in registers across the whole k loop.
inline void nn_row_block16(const double* arow, const double* b, std::size_t ldb, double* crow,
                           std::size_t j, std::size_t k, bool accumulate) {
  __m256d c0, c1, c2, c3;
  if (accumulate) {
    c0 = _mm256_loadu_pd(crow + j + 0);
    c1 = _mm256_loadu_pd(crow + j + 4);
    c2 = _mm256_loadu_pd(crow + j + 8);
    c3 = _mm256_loadu_pd(crow + j + 12);
  } else {
    c0 = c1 = c2 = c3 = _mm256_setzero_pd();
  }
  for (std::size_t p = 0; p < k; ++p) {
    __m256d av = _mm256_set1_pd(arow[p]);
    const double* brow = b + p * ldb + j;
    c0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + 0), c0);
    c1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + 4), c1);
    c2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + 8), c2);
    c3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + 12), c3);
  }
  _mm256_storeu_pd(crow + j + 0, c0);
  _mm256_storeu_pd(crow + j + 4, c1);
  _mm256_storeu_pd(crow + j + 8, c2);
  _mm256_storeu_pd(crow + j + 12, c3);
}

// Four C rows, 8 columns: better fma/load balance for inner blocks.
inline void nn_block4x8(const double* a, std::size_t lda, const double* b, std::size_t ldb,
                        double* c, std::size_t ldc, std::size_t i, std::size_t j, std::size_t k,
                        bool accumulate) {
  __m256d c00, c01, c10, c11, c20, c21, c30, c31;
  if (accumulate) {
    c00 = _mm256_loadu_pd(c + (i + 0) * ldc + j);
    c01 = _mm256_loadu_pd(c + (i + 0) * ldc + j + 4);
    c10 = _mm256_loadu_pd(c + (i + 1) * ldc + j);
    c11 = _mm256_loadu_pd(c + (i + 1) * ldc + j + 4);
    c20 = _mm256_loadu_pd(c + (i + 2) * ldc + j);
    c21 = _mm256_loadu_pd(c + (i + 2) * ldc + j + 4);
    c30 = _mm256_loadu_pd(c + (i + 3) * ldc + j);
    c31 = _mm256_loadu_pd(c + (i + 3) * ldc + j + 4);
  } else {
    c00 = c01 = c10 = c11 = c20 = c21 = c30 = c31 = _mm256_setzero_pd();
  }
  const double* a0 = a + (i + 0) * lda;
  const double* a1 = a + (i + 1) * lda;
  const double* a2 = a + (i + 2) * lda;
  const double* a3 = a + (i + 3) * lda;
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * ldb + j;
    __m256d b0 = _mm256_loadu_pd(brow);
    __m256d b1 = _mm256_loadu_pd(brow + 4);
    __m256d av;
    av = _mm256_set1_pd(a0[p]);
    c00 = _mm256_fmadd_pd(av, b0, c00);
    c01 = _mm256_fmadd_pd(av, b1, c01);
    av = _mm256_set1_pd(a1[p]);
    c10 = _mm256_fmadd_pd(av, b0, c10);
    c11 = _mm256_fmadd_pd(av, b1, c11);
    av = _mm256_set1_pd(a2[p]);
    c20 = _mm256_fmadd_pd(av, b0, c20);
    c21 = _mm256_fmadd_pd(av, b1, c21);
    av = _mm256_set1_pd(a3[p]);
    c30 = _mm256_fmadd_pd(av, b0, c30);
    c31 = _mm256_fmadd_pd(av, b1, c31);
  }
  _mm256_storeu_pd(c + (i + 0) * ldc + j, c00);
  _mm256_storeu_pd(c + (i + 0) * ldc + j + 4, c01);
  _mm256_storeu_pd(c + (i + 1) * ldc + j, c10);
  _mm256_storeu_pd(c + (i + 1) * ldc + j + 4, c11);
  _mm256_storeu_pd(c + (i + 2) * ldc + j, c20);
  _mm256_storeu_pd(c + (i + 2) * ldc + j + 4, c21);
  _mm256_storeu_pd(c + (i + 3) * ldc + j, c30);
  _mm256_storeu_pd(c + (i + 3) * ldc + j + 4, c31);
}

// Single row remainder: 4-wide then scalar, same k chain.
inline void nn_row_tail(const double* arow, const double* b, std::size_t ldb, double* crow,
                        std::size_t j0, std::size_t n, std::size_t k, bool accumulate) {
  std::size_t j = j0;
  for (; j + 4 <= n; j += 4) {
    __m256d cv = accumulate ? _mm256_loadu_pd(crow + j) : _mm256_setzero_pd();
    for (std::size_t p = 0; p < k; ++p)
      cv = _mm256_fmadd_pd(_mm256_set1_pd(arow[p]), _mm256_loadu_pd(b + p * ldb + j), cv);
    _mm256_storeu_pd(crow + j, cv);
  }
  for (; j < n; ++j) {
    double acc = accumulate ? crow[j] : 0.0;
    for (std::size_t p = 0; p < k; ++p) acc = std::fma(arow[p], b[p * ldb + j], acc);
    crow[j] = acc;
  }
}

void v_gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) nn_block4x8(a, lda, b, ldb, c, ldc, i, j, k, accumulate);
    if (j < n)
      for (std::size_t r = 0; r < 4; ++r)
        nn_row_tail(a + (i + r) * lda, b, ldb, c + (i + r) * ldc, j, n, k, accumulate);
  }
  for (; i < m; ++i) {
    const double* arow = a + i * lda;
    double* crow = c + i * ldc;
    std::size_t j = 0;
    for (; j + 16 <= n; j += 16) nn_row_block16(arow, b, ldb, crow, j, k, accumulate);
    nn_row_tail(arow, b, ldb, crow, j, n, k, accumulate);
  }
}

// One C row, four columns: four accumulator chains sharing the a loads.
// Lane l of each accumulator owns k positions p%4 == l, as in v_dot.
inline void nt_row4(const double* arow, const double* b, std::size_t ldb, double* crow,
                    std::size_t j, std::size_t k, std::size_t k4, bool accumulate) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  __m256d acc2 = _mm256_setzero_pd();
  __m256d acc3 = _mm256_setzero_pd();
  const double* b0 = b + (j + 0) * ldb;
  const double* b1 = b + (j + 1) * ldb;
  const double* b2 = b + (j + 2) * ldb;
  const double* b3 = b + (j + 3) * ldb;
  for (std::size_t p = 0; p < k4; p += 4) {
    __m256d av = _mm256_loadu_pd(arow + p);
    acc0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b0 + p), acc0);
    acc1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b1 + p), acc1);
    acc2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b2 + p), acc2);
    acc3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b3 + p), acc3);
  }
  double r0 = hcombine(acc0);
  double r1 = hcombine(acc1);
  double r2 = hcombine(acc2);
  double r3 = hcombine(acc3);
  for (std::size_t p = k4; p < k; ++p) {
    double av = arow[p];
    r0 = std::fma(av, b0[p], r0);
    r1 = std::fma(av, b1[p], r1);
    r2 = std::fma(av, b2[p], r2);
    r3 = std::fma(av, b3[p], r3);
  }
  if (accumulate) {
    crow[j + 0] += r0;
    crow[j + 1] += r1;
    crow[j + 2] += r2;
    crow[j + 3] += r3;
  } else {
    crow[j + 0] = r0;
    crow[j + 1] = r1;
    crow[j + 2] = r2;
    crow[j + 3] = r3;
  }
}

// Two C rows x four columns: eight independent chains share the a/b loads,
// which hides the fma latency. Per-element accumulation order is identical
// to nt_row4 (and so to the scalar reference).
inline void nt_block2x4(const double* a0, const double* a1, const double* b, std::size_t ldb,
                        double* c0, double* c1, std::size_t j, std::size_t k, std::size_t k4,
                        bool accumulate) {
  __m256d s00 = _mm256_setzero_pd(), s01 = _mm256_setzero_pd();
  __m256d s02 = _mm256_setzero_pd(), s03 = _mm256_setzero_pd();
  __m256d s10 = _mm256_setzero_pd(), s11 = _mm256_setzero_pd();
  __m256d s12 = _mm256_setzero_pd(), s13 = _mm256_setzero_pd();
  const double* b0 = b + (j + 0) * ldb;
  const double* b1 = b + (j + 1) * ldb;
  const double* b2 = b + (j + 2) * ldb;
  const double* b3 = b + (j + 3) * ldb;
  for (std::size_t p = 0; p < k4; p += 4) {
    __m256d av0 = _mm256_loadu_pd(a0 + p);
    __m256d av1 = _mm256_loadu_pd(a1 + p);
    __m256d bv = _mm256_loadu_pd(b0 + p);
    s00 = _mm256_fmadd_pd(av0, bv, s00);
    s10 = _mm256_fmadd_pd(av1, bv, s10);
    bv = _mm256_loadu_pd(b1 + p);
    s01 = _mm256_fmadd_pd(av0, bv, s01);
    s11 = _mm256_fmadd_pd(av1, bv, s11);
    bv = _mm256_loadu_pd(b2 + p);
    s02 = _mm256_fmadd_pd(av0, bv, s02);
    s12 = _mm256_fmadd_pd(av1, bv, s12);
    bv = _mm256_loadu_pd(b3 + p);
    s03 = _mm256_fmadd_pd(av0, bv, s03);
    s13 = _mm256_fmadd_pd(av1, bv, s13);
  }
  double r00 = hcombine(s00), r01 = hcombine(s01), r02 = hcombine(s02), r03 = hcombine(s03);
  double r10 = hcombine(s10), r11 = hcombine(s11), r12 = hcombine(s12), r13 = hcombine(s13);
  for (std::size_t p = k4; p < k; ++p) {
    double x0 = a0[p], x1 = a1[p];
    r00 = std::fma(x0, b0[p], r00);
    r01 = std::fma(x0, b1[p], r01);
    r02 = std::fma(x0, b2[p], r02);
    r03 = std::fma(x0, b3[p], r03);
    r10 = std::fma(x1, b0[p], r10);
    r11 = std::fma(x1, b1[p], r11);
    r12 = std::fma(x1, b2[p], r12);
    r13 = std::fma(x1, b3[p], r13);
  }
  if (accumulate) {
    c0[j + 0] += r00;
    c0[j + 1] += r01;
    c0[j + 2] += r02;
    c0[j + 3] += r03;
    c1[j + 0] += r10;
    c1[j + 1] += r11;
    c1[j + 2] += r12;
    c1[j + 3] += r13;
  } else {
    c0[j + 0] = r00;
    c0[j + 1] = r01;
    c0[j + 2] = r02;
    c0[j + 3] = r03;
    c1[j + 0] = r10;
    c1[j + 1] = r11;
    c1[j + 2] = r12;
    c1[j + 3] = r13;
  }
}

// Single dot-product remainder column.
inline void nt_single(const double* arow, const double* brow, double* cptr, std::size_t k,
                      std::size_t k4, bool accumulate) {
  __m256d acc = _mm256_setzero_pd();
  for (std::size_t p = 0; p < k4; p += 4)
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(arow + p), _mm256_loadu_pd(brow + p), acc);
  double r = hcombine(acc);
  for (std::size_t p = k4; p < k; ++p) r = std::fma(arow[p], brow[p], r);
  *cptr = accumulate ? *cptr + r : r;
}

void v_gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  std::size_t k4 = k & ~std::size_t{3};
  std::size_t i = 0;
  for (; i + 2 <= m; i += 2) {
    const double* a0 = a + i * lda;
    const double* a1 = a + (i + 1) * lda;
    double* c0 = c + i * ldc;
    double* c1 = c + (i + 1) * ldc;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) nt_block2x4(a0, a1, b, ldb, c0, c1, j, k, k4, accumulate);
    for (; j < n; ++j) {
      nt_single(a0, b + j * ldb, c0 + j, k, k4, accumulate);
      nt_single(a1, b + j * ldb, c1 + j, k, k4, accumulate);
    }
  }
  for (; i < m; ++i) {
    const double* arow = a + i * lda;
    double* crow = c + i * ldc;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) nt_row4(arow, b, ldb, crow, j, k, k4, accumulate);
    for (; j < n; ++j) nt_single(arow, b + j * ldb, crow + j, k, k4, accumulate);
  }
}

void v_gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = c + i * ldc;
      std::size_t j = 0;
      __m256d z = _mm256_setzero_pd();
      for (; j + 4 <= n; j += 4) _mm256_storeu_pd(crow + j, z);
      for (; j < n; ++j) crow[j] = 0.0;
    }
  // Eight k rows per pass over C: one C load/store per eight fmas instead of
  // one per fma. Each element still accumulates in ascending k order.
  std::size_t p = 0;
  for (; p + 8 <= k; p += 8) {
    const double* b0 = b + (p + 0) * ldb;
    const double* b1 = b + (p + 1) * ldb;
    const double* b2 = b + (p + 2) * ldb;
    const double* b3 = b + (p + 3) * ldb;
    const double* b4 = b + (p + 4) * ldb;
    const double* b5 = b + (p + 5) * ldb;
    const double* b6 = b + (p + 6) * ldb;
    const double* b7 = b + (p + 7) * ldb;
    for (std::size_t i = 0; i < m; ++i) {
      const double* acol = a + i;
      double x0 = acol[(p + 0) * lda], x1 = acol[(p + 1) * lda];
      double x2 = acol[(p + 2) * lda], x3 = acol[(p + 3) * lda];
      double x4 = acol[(p + 4) * lda], x5 = acol[(p + 5) * lda];
      double x6 = acol[(p + 6) * lda], x7 = acol[(p + 7) * lda];
      __m256d av0 = _mm256_set1_pd(x0), av1 = _mm256_set1_pd(x1);
      __m256d av2 = _mm256_set1_pd(x2), av3 = _mm256_set1_pd(x3);
      __m256d av4 = _mm256_set1_pd(x4), av5 = _mm256_set1_pd(x5);
      __m256d av6 = _mm256_set1_pd(x6), av7 = _mm256_set1_pd(x7);
      double* crow = c + i * ldc;
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d cv = _mm256_loadu_pd(crow + j);
        cv = _mm256_fmadd_pd(av0, _mm256_loadu_pd(b0 + j), cv);
        cv = _mm256_fmadd_pd(av1, _mm256_loadu_pd(b1 + j), cv);
        cv = _mm256_fmadd_pd(av2, _mm256_loadu_pd(b2 + j), cv);
        cv = _mm256_fmadd_pd(av3, _mm256_loadu_pd(b3 + j), cv);
        cv = _mm256_fmadd_pd(av4, _mm256_loadu_pd(b4 + j), cv);
        cv = _mm256_fmadd_pd(av5, _mm256_loadu_pd(b5 + j), cv);
        cv = _mm256_fmadd_pd(av6, _mm256_loadu_pd(b6 + j), cv);
        cv = _mm256_fmadd_pd(av7, _mm256_loadu_pd(b7 + j), cv);
        _mm256_storeu_pd(crow + j, cv);
      }
      for (; j < n; ++j) {
        double cc = crow[j];
        cc = std::fma(x0, b0[j], cc);
        cc = std::fma(x1, b1[j], cc);
        cc = std::fma(x2, b2[j], cc);
        cc = std::fma(x3, b3[j], cc);
        cc = std::fma(x4, b4[j], cc);
        cc = std::fma(x5, b5[j], cc);
        cc = std::fma(x6, b6[j], cc);
        cc = std::fma(x7, b7[j], cc);
        crow[j] = cc;
      }
    }
  }
  for (; p < k; ++p) {
    const double* arow = a + p * lda;
    const double* brow = b + p * ldb;
    for (std::size_t i = 0; i < m; ++i) {
      __m256d av = _mm256_set1_pd(arow[i]);
      double* crow = c + i * ldc;
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4)
        _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + j), _mm256_loadu_pd(crow + j)));
      for (; j < n; ++j) crow[j] = std::fma(arow[i], brow[j], crow[j]);
    }
  }
}

}  // namespace

const Ops& avx2_ops() {
  static const Ops table = {
      "avx2", v_add, v_sub, v_mul, v_scale, v_axpy, v_dot, v_sum, v_max,
      v_gemm_nn, v_gemm_nt, v_gemm_tn,
  };
  return table;
}

}  // namespace vikdf::kern

#endif  // VIKDF_KERNELS_AVX2
