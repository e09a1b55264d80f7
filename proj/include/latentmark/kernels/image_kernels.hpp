// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

// Pixel-domain inner loops shared by poisoning, loss evaluation and the
// quality metrics. Every entry point exists as a scalar reference and, on
// x86-64, an AVX2+FMA variant. The active table is chosen once at startup
// from CPUID; LATENTMARK_ISA=scalar forces the reference path.

#pragma once

#include <cstddef>
#include <span>
#include <string_view>

namespace latentmark::kernels {

enum class Isa { kScalar, kAvx2 };

std::string_view isa_name(Isa isa);

struct KernelTable {
  Isa isa;

  // out[c*plane + i] = x[c*plane + i] * (1 - lambda) + m[i] * lambda.
  // `m` holds one plane and is broadcast over channels.
  void (*blend)(std::span<const float> x, std::span<const float> m, float lambda,
                std::size_t channels, std::span<float> out);

  // Per-pixel alpha blend: out = x * (1 - alpha) + pattern * alpha, alpha and
  // pattern broadcast over channels.
  void (*blend_alpha)(std::span<const float> x, std::span<const float> pattern,
                      std::span<const float> alpha, std::size_t channels, std::span<float> out);

  // sum_i relu(|a_i - b_i| - eps)^2
  double (*hinge_sq_sum)(std::span<const float> a, std::span<const float> b, float eps);

  // sum_i (a_i - b_i)^2
  double (*sq_diff_sum)(std::span<const float> a, std::span<const float> b);

  // sum_i (a_i - s)^2 for a scalar s
  double (*sq_dev_sum)(std::span<const float> a, float s);

  // sum_i |a_i|
  double (*abs_sum)(std::span<const float> a);

  // 1-D correlation along rows with "valid" extent: out is rows x (cols - k + 1).
  void (*filter_rows_valid)(std::span<const float> in, std::size_t rows, std::size_t cols,
                            std::span<const float> taps, std::span<float> out);

  // 1-D correlation along columns with "valid" extent: out is (rows - k + 1) x cols.
  void (*filter_cols_valid)(std::span<const float> in, std::size_t rows, std::size_t cols,
                            std::span<const float> taps, std::span<float> out);

  // Elementwise product: out_i = a_i * b_i.
  void (*mul)(std::span<const float> a, std::span<const float> b, std::span<float> out);
};

const KernelTable& scalar_kernels();

// nullptr when the build has no AVX2 path or the CPU lacks AVX2/FMA.
const KernelTable* avx2_kernels();

// The dispatched table for this process.
const KernelTable& active_kernels();

}  // namespace latentmark::kernels
