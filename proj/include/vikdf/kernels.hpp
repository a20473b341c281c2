// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 compute kernels: scalar reference implementations plus SIMD
// variants (AVX2 on x86-64, NEON on aarch64) selected at runtime.
//
// Every variant is required to produce bit-identical results to the scalar
// reference. The contract that makes this possible:
//   * matrix products accumulate with an fma chain that walks k in
//     increasing order for each output element,
//   * reductions (dot, sum) use a fixed 4-lane blocked order: lane l owns
//     indices i with i % 4 == l, lanes combine as (l0+l1)+(l2+l3), and the
//     remainder folds in sequentially,
//   * elementwise ops are lane-independent.
// Equivalence is enforced by tests that compare backends on random data.

#pragma once

#include <cstddef>

namespace vikdf::kern {

enum class Backend { Auto, Scalar, Avx2, Neon };

// Kernel function table. One instance per backend.
struct Ops {
  const char* name;

  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  void (*sub)(const double* a, const double* b, double* out, std::size_t n);
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  void (*scale)(const double* a, double s, double* out, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  double (*dot)(const double* a, const double* b, std::size_t n);
  double (*sum)(const double* a, std::size_t n);
  double (*max)(const double* a, std::size_t n);

  // Row-major matrix products. C is M x N with row stride ldc.
  //   gemm_nn: C (+)= A[M,K] * B[K,N]
  //   gemm_nt: C (+)= A[M,K] * B[N,K]^T
  //   gemm_tn: C (+)= A[K,M]^T * B[K,N]
  // When accumulate is false C is overwritten.
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
};

// Pick the active backend. Auto selects the best variant the CPU supports.
// Returns the backend actually selected; requesting an unavailable backend
// falls back to Scalar.
Backend select_backend(Backend b);
Backend active_backend();
const char* backend_name();

const Ops& scalar_ops();
#if defined(VIKDF_KERNELS_AVX2)
const Ops& avx2_ops();
#endif
#if defined(VIKDF_KERNELS_NEON)
const Ops& neon_ops();
#endif

// Active-table forwarders.
const Ops& ops();

inline void add(const double* a, const double* b, double* out, std::size_t n) { ops().add(a, b, out, n); }
inline void sub(const double* a, const double* b, double* out, std::size_t n) { ops().sub(a, b, out, n); }
inline void mul(const double* a, const double* b, double* out, std::size_t n) { ops().mul(a, b, out, n); }
inline void scale(const double* a, double s, double* out, std::size_t n) { ops().scale(a, s, out, n); }
inline void axpy(double alpha, const double* x, double* y, std::size_t n) { ops().axpy(alpha, x, y, n); }
inline double dot(const double* a, const double* b, std::size_t n) { return ops().dot(a, b, n); }
inline double sum(const double* a, std::size_t n) { return ops().sum(a, n); }
inline double max(const double* a, std::size_t n) { return ops().max(a, n); }

inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  ops().gemm_nn(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  ops().gemm_nt(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  ops().gemm_tn(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

}  // namespace vikdf::kern
