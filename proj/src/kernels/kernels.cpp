// SPDX-License-Identifier: Apache-2.0
//
// Runtime backend selection for the kernel layer.

#include "vikdf/kernels.hpp"

namespace vikdf::kern {
namespace {

const Ops* g_active = nullptr;
Backend g_backend = Backend::Scalar;

bool cpu_has_avx2() {
#if defined(VIKDF_KERNELS_AVX2) && (defined(__GNUC__) || defined(__clang__))
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

void init_if_needed() {
  if (!g_active) select_backend(Backend::Auto);
}

}  // namespace

Backend select_backend(Backend b) {
  switch (b) {
    case Backend::Auto:
#if defined(VIKDF_KERNELS_AVX2)
      if (cpu_has_avx2()) {
        g_active = &avx2_ops();
        g_backend = Backend::Avx2;
        return g_backend;
      }
#endif
#if defined(VIKDF_KERNELS_NEON)
      g_active = &neon_ops();
      g_backend = Backend::Neon;
      return g_backend;
#endif
      g_active = &scalar_ops();
      g_backend = Backend::Scalar;
      return g_backend;
    case Backend::Avx2:
#if defined(VIKDF_KERNELS_AVX2)
      if (cpu_has_avx2()) {
        g_active = &avx2_ops();
        g_backend = Backend::Avx2;
        return g_backend;
      }
#endif
      break;
    case Backend::Neon:
#if defined(VIKDF_KERNELS_NEON)
      g_active = &neon_ops();
      g_backend = Backend::Neon;
      return g_backend;
#endif
      break;
    case Backend::Scalar:
      break;
  }
  g_active = &scalar_ops();
  g_backend = Backend::Scalar;
  return g_backend;
}

Backend active_backend() {
  init_if_needed();
  return g_backend;
}

const char* backend_name() {
  init_if_needed();
  return g_active->name;
}

const Ops& ops() {
  init_if_needed();
  return *g_active;
}

}  // namespace vikdf::kern
