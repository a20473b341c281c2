// SPDX-License-Identifier: Apache-2.0
//
// Kernel value oracles and cross-backend bit-equivalence. The naive
// references here use a different summation order on purpose, so value
// checks carry a tolerance while backend comparisons demand identical bits.

#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "vikdf/kernels.hpp"
#include "vikdf/rng.hpp"

using namespace vikdf;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

double naive_dot(const double* a, const double* b, std::size_t n) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<long double>(a[i]) * b[i];
  return static_cast<double>(s);
}

// C (+)= op(A, B) with the mathematical index convention of each variant.
enum class Kind { NN, NT, TN };
void naive_gemm(Kind kind, std::size_t m, std::size_t n, std::size_t k, const double* a,
                std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
                bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      long double s = 0.0L;
      for (std::size_t p = 0; p < k; ++p) {
        double av = kind == Kind::TN ? a[p * lda + i] : a[i * lda + p];
        double bv = kind == Kind::NT ? b[j * ldb + p] : b[p * ldb + j];
        s += static_cast<long double>(av) * bv;
      }
      double& out = c[i * ldc + j];
      out = (accumulate ? out : 0.0) + static_cast<double>(s);
    }
}

void run_gemm(const kern::Ops& ops, Kind kind, std::size_t m, std::size_t n, std::size_t k,
              const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
              std::size_t ldc, bool accumulate) {
  switch (kind) {
    case Kind::NN: ops.gemm_nn(m, n, k, a, lda, b, ldb, c, ldc, accumulate); break;
    case Kind::NT: ops.gemm_nt(m, n, k, a, lda, b, ldb, c, ldc, accumulate); break;
    case Kind::TN: ops.gemm_tn(m, n, k, a, lda, b, ldb, c, ldc, accumulate); break;
  }
}

const std::vector<std::size_t> kSizes = {1, 2, 3, 4, 5, 7, 8, 15, 16, 17, 31, 33, 64, 100};

}  // namespace

TEST_CASE("elementwise kernels match plain loops") {
  Rng rng(11);
  const auto& ops = kern::ops();
  for (std::size_t n : kSizes) {
    std::vector<double> a = random_vec(rng, n), b = random_vec(rng, n), out(n, -7.0);
    ops.add(a.data(), b.data(), out.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(out[i] == a[i] + b[i]);
    ops.sub(a.data(), b.data(), out.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(out[i] == a[i] - b[i]);
    ops.mul(a.data(), b.data(), out.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(out[i] == a[i] * b[i]);
    ops.scale(a.data(), 1.75, out.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(out[i] == a[i] * 1.75);
    std::vector<double> y = b;
    ops.axpy(0.5, a.data(), y.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(y[i] == std::fma(0.5, a[i], b[i]));
  }
}

TEST_CASE("reduction kernels match references") {
  Rng rng(12);
  const auto& ops = kern::ops();
  for (std::size_t n : kSizes) {
    std::vector<double> a = random_vec(rng, n), b = random_vec(rng, n);
    CHECK(ops.dot(a.data(), b.data(), n) ==
          doctest::Approx(naive_dot(a.data(), b.data(), n)).epsilon(1e-12));
    CHECK(ops.sum(a.data(), n) ==
          doctest::Approx(naive_dot(a.data(), std::vector<double>(n, 1.0).data(), n))
              .epsilon(1e-12));
    double m = a[0];
    for (double x : a) m = std::max(m, x);
    CHECK(ops.max(a.data(), n) == m);
  }
}

TEST_CASE("gemm variants match a naive triple loop") {
  Rng rng(13);
  const auto& ops = kern::ops();
  for (int trial = 0; trial < 40; ++trial) {
    std::size_t m = 1 + rng.uniform_int(17), n = 1 + rng.uniform_int(17),
                k = 1 + rng.uniform_int(17);
    for (Kind kind : {Kind::NN, Kind::NT, Kind::TN}) {
      std::size_t lda = kind == Kind::TN ? m : k;
      std::size_t ldb = kind == Kind::NT ? k : n;
      std::vector<double> a = random_vec(rng, kind == Kind::TN ? k * lda : m * lda);
      std::vector<double> b = random_vec(rng, kind == Kind::NT ? n * ldb : k * ldb);
      for (bool acc : {false, true}) {
        std::vector<double> c = random_vec(rng, m * n), ref = c;
        run_gemm(ops, kind, m, n, k, a.data(), lda, b.data(), ldb, c.data(), n, acc);
        naive_gemm(kind, m, n, k, a.data(), lda, b.data(), ldb, ref.data(), n, acc);
        for (std::size_t i = 0; i < m * n; ++i)
          CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("gemm respects an output row stride wider than the row") {
  Rng rng(14);
  const auto& ops = kern::ops();
  std::size_t m = 5, n = 7, k = 9, ldc = n + 3;
  std::vector<double> a = random_vec(rng, m * k), b = random_vec(rng, k * n);
  std::vector<double> c(m * ldc, 123.0);
  ops.gemm_nn(m, n, k, a.data(), k, b.data(), n, c.data(), ldc, false);
  std::vector<double> ref(m * n, 0.0);
  naive_gemm(Kind::NN, m, n, k, a.data(), k, b.data(), n, ref.data(), n, false);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j)
      CHECK(c[i * ldc + j] == doctest::Approx(ref[i * n + j]).epsilon(1e-10));
    for (std::size_t j = n; j < ldc; ++j) CHECK(c[i * ldc + j] == 123.0);
  }
}

TEST_CASE("every built backend is bit-identical to the scalar reference") {
  std::vector<const kern::Ops*> variants;
#if defined(VIKDF_KERNELS_AVX2)
  if (kern::select_backend(kern::Backend::Avx2) == kern::Backend::Avx2)
    variants.push_back(&kern::avx2_ops());
#endif
#if defined(VIKDF_KERNELS_NEON)
  if (kern::select_backend(kern::Backend::Neon) == kern::Backend::Neon)
    variants.push_back(&kern::neon_ops());
#endif
  kern::select_backend(kern::Backend::Auto);
  const auto& sc = kern::scalar_ops();

  for (const kern::Ops* simd : variants) {
    INFO("backend ", simd->name);
    Rng rng(15);
    for (std::size_t n : kSizes) {
      std::vector<double> a = random_vec(rng, n), b = random_vec(rng, n);
      std::vector<double> o1(n), o2(n);
      simd->add(a.data(), b.data(), o1.data(), n);
      sc.add(a.data(), b.data(), o2.data(), n);
      CHECK(std::memcmp(o1.data(), o2.data(), n * 8) == 0);
      simd->mul(a.data(), b.data(), o1.data(), n);
      sc.mul(a.data(), b.data(), o2.data(), n);
      CHECK(std::memcmp(o1.data(), o2.data(), n * 8) == 0);
      simd->scale(a.data(), -0.37, o1.data(), n);
      sc.scale(a.data(), -0.37, o2.data(), n);
      CHECK(std::memcmp(o1.data(), o2.data(), n * 8) == 0);
      std::vector<double> y1 = b, y2 = b;
      simd->axpy(1.3, a.data(), y1.data(), n);
      sc.axpy(1.3, a.data(), y2.data(), n);
      CHECK(std::memcmp(y1.data(), y2.data(), n * 8) == 0);
      CHECK(simd->dot(a.data(), b.data(), n) == sc.dot(a.data(), b.data(), n));
      CHECK(simd->sum(a.data(), n) == sc.sum(a.data(), n));
      CHECK(simd->max(a.data(), n) == sc.max(a.data(), n));
    }
    // gemms across shapes that hit every blocking remainder
    for (int trial = 0; trial < 60; ++trial) {
      std::size_t m = 1 + rng.uniform_int(19), n = 1 + rng.uniform_int(19),
                  k = 1 + rng.uniform_int(19);
      for (Kind kind : {Kind::NN, Kind::NT, Kind::TN}) {
        std::size_t lda = kind == Kind::TN ? m : k;
        std::size_t ldb = kind == Kind::NT ? k : n;
        std::vector<double> a = random_vec(rng, kind == Kind::TN ? k * lda : m * lda);
        std::vector<double> b = random_vec(rng, kind == Kind::NT ? n * ldb : k * ldb);
        for (bool acc : {false, true}) {
          std::vector<double> c1 = random_vec(rng, m * n), c2 = c1;
          run_gemm(*simd, kind, m, n, k, a.data(), lda, b.data(), ldb, c1.data(), n, acc);
          run_gemm(sc, kind, m, n, k, a.data(), lda, b.data(), ldb, c2.data(), n, acc);
          CHECK(std::memcmp(c1.data(), c2.data(), m * n * 8) == 0);
        }
      }
    }
  }
}

TEST_CASE("backend selection falls back to scalar when unavailable") {
  kern::Backend previous = kern::active_backend();
  kern::Backend got = kern::select_backend(kern::Backend::Scalar);
  CHECK(got == kern::Backend::Scalar);
  CHECK(kern::active_backend() == kern::Backend::Scalar);
  CHECK(std::string(kern::backend_name()) == "scalar");

#if !defined(VIKDF_KERNELS_NEON)
  CHECK(kern::select_backend(kern::Backend::Neon) == kern::Backend::Scalar);
#endif
#if !defined(VIKDF_KERNELS_AVX2)
  CHECK(kern::select_backend(kern::Backend::Avx2) == kern::Backend::Scalar);
#endif

  kern::Backend autod = kern::select_backend(kern::Backend::Auto);
  CHECK((autod == kern::Backend::Scalar || autod == kern::Backend::Avx2 ||
         autod == kern::Backend::Neon));
  kern::select_backend(previous);
}
