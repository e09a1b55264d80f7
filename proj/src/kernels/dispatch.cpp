// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <string>

#include "latentmark/kernels/image_kernels.hpp"

namespace latentmark::kernels {

#if defined(LATENTMARK_HAVE_AVX2)
const KernelTable& avx2_table();
#endif

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::kScalar:
      return "scalar";
    case Isa::kAvx2:
      return "avx2";
  }
  return "unknown";
}

const KernelTable* avx2_kernels() {
#if defined(LATENTMARK_HAVE_AVX2)
  static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &avx2_table() : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active_kernels() {
  static const KernelTable& table = []() -> const KernelTable& {
    if (const char* env = std::getenv("LATENTMARK_ISA"); env != nullptr && std::string(env) == "scalar")
      return scalar_kernels();
    if (const KernelTable* t = avx2_kernels()) return *t;
    return scalar_kernels();
  }();
  return table;
}

}  // namespace latentmark::kernels
