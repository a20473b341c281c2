// SPDX-License-Identifier: Apache-2.0
//
// NEON kernel variants for aarch64. Two 2-lane vectors emulate the 4-lane
// blocked accumulation of the scalar reference, keeping results bit-identical.

#include "vikdf/kernels.hpp"

#if defined(VIKDF_KERNELS_NEON)

#include <arm_neon.h>

#include <cmath>

namespace vikdf::kern {
namespace {

void v_add(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void v_sub(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void v_mul(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void v_scale(const double* a, double s, double* out, std::size_t n) {
  float64x2_t sv = vdupq_n_f64(s);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), sv));
  for (; i < n; ++i) out[i] = a[i] * s;
}

void v_axpy(double alpha, const double* x, double* y, std::size_t n) {
  float64x2_t av = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), av, vld1q_f64(x + i)));
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

// acc0 holds lanes {i%4==0, i%4==1}, acc1 holds {2, 3}; combine matches the
// scalar (l0+l1)+(l2+l3).
inline double hcombine(float64x2_t v01, float64x2_t v23) {
  double l01 = vgetq_lane_f64(v01, 0) + vgetq_lane_f64(v01, 1);
  double l23 = vgetq_lane_f64(v23, 0) + vgetq_lane_f64(v23, 1);
  return l01 + l23;
}

double v_dot(const double* a, const double* b, std::size_t n) {
  float64x2_t acc01 = vdupq_n_f64(0.0), acc23 = vdupq_n_f64(0.0);
  std::size_t n4 = n & ~std::size_t{3};
  for (std::size_t i = 0; i < n4; i += 4) {
    acc01 = vfmaq_f64(acc01, vld1q_f64(a + i), vld1q_f64(b + i));
    acc23 = vfmaq_f64(acc23, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
  }
  double r = hcombine(acc01, acc23);
  for (std::size_t i = n4; i < n; ++i) r = std::fma(a[i], b[i], r);
  return r;
}

double v_sum(const double* a, std::size_t n) {
  float64x2_t acc01 = vdupq_n_f64(0.0), acc23 = vdupq_n_f64(0.0);
  std::size_t n4 = n & ~std::size_t{3};
  for (std::size_t i = 0; i < n4; i += 4) {
    acc01 = vaddq_f64(acc01, vld1q_f64(a + i));
    acc23 = vaddq_f64(acc23, vld1q_f64(a + i + 2));
  }
  double r = hcombine(acc01, acc23);
  for (std::size_t i = n4; i < n; ++i) r += a[i];
  return r;
}

double v_max(const double* a, std::size_t n) {
  double m = a[0];
  for (std::size_t i = 1; i < n; ++i)
    if (a[i] > m) m = a[i];
  return m;
}

void v_gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * lda;
    double* crow = c + i * ldc;
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      float64x2_t c0, c1, c2, c3;
      if (accumulate) {
        c0 = vld1q_f64(crow + j + 0);
        c1 = vld1q_f64(crow + j + 2);
        c2 = vld1q_f64(crow + j + 4);
        c3 = vld1q_f64(crow + j + 6);
      } else {
        c0 = c1 = c2 = c3 = vdupq_n_f64(0.0);
      }
      for (std::size_t p = 0; p < k; ++p) {
        float64x2_t av = vdupq_n_f64(arow[p]);
        const double* brow = b + p * ldb + j;
        c0 = vfmaq_f64(c0, av, vld1q_f64(brow + 0));
        c1 = vfmaq_f64(c1, av, vld1q_f64(brow + 2));
        c2 = vfmaq_f64(c2, av, vld1q_f64(brow + 4));
        c3 = vfmaq_f64(c3, av, vld1q_f64(brow + 6));
      }
      vst1q_f64(crow + j + 0, c0);
      vst1q_f64(crow + j + 2, c1);
      vst1q_f64(crow + j + 4, c2);
      vst1q_f64(crow + j + 6, c3);
    }
    for (; j + 2 <= n; j += 2) {
      float64x2_t cv = accumulate ? vld1q_f64(crow + j) : vdupq_n_f64(0.0);
      for (std::size_t p = 0; p < k; ++p)
        cv = vfmaq_f64(cv, vdupq_n_f64(arow[p]), vld1q_f64(b + p * ldb + j));
      vst1q_f64(crow + j, cv);
    }
    for (; j < n; ++j) {
      double acc = accumulate ? crow[j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) acc = std::fma(arow[p], b[p * ldb + j], acc);
      crow[j] = acc;
    }
  }
}

void v_gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  std::size_t k4 = k & ~std::size_t{3};
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * lda;
    double* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * ldb;
      float64x2_t acc01 = vdupq_n_f64(0.0), acc23 = vdupq_n_f64(0.0);
      for (std::size_t p = 0; p < k4; p += 4) {
        acc01 = vfmaq_f64(acc01, vld1q_f64(arow + p), vld1q_f64(brow + p));
        acc23 = vfmaq_f64(acc23, vld1q_f64(arow + p + 2), vld1q_f64(brow + p + 2));
      }
      double r = hcombine(acc01, acc23);
      for (std::size_t p = k4; p < k; ++p) r = std::fma(arow[p], brow[p], r);
      crow[j] = accumulate ? crow[j] + r : r;
    }
  }
}

void v_gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * lda;
    const double* brow = b + p * ldb;
    for (std::size_t i = 0; i < m; ++i) {
      float64x2_t av = vdupq_n_f64(arow[i]);
      double* crow = c + i * ldc;
      std::size_t j = 0;
      for (; j + 2 <= n; j += 2)
        vst1q_f64(crow + j, vfmaq_f64(vld1q_f64(crow + j), av, vld1q_f64(brow + j)));
      for (; j < n; ++j) crow[j] = std::fma(arow[i], brow[j], crow[j]);
    }
  }
}

}  // namespace

const Ops& neon_ops() {
  static const Ops table = {
      "neon", v_add, v_sub, v_mul, v_scale, v_axpy, v_dot, v_sum, v_max,
      v_gemm_nn, v_gemm_nt, v_gemm_tn,
  };
  return table;
}

}  // namespace vikdf::kern

#endif  // VIKDF_KERNELS_NEON
