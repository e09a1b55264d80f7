// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

// Compiled with -mavx2 -mfma -ffp-contract=off. Only reachable through
// avx2_kernels(), which checks CPUID first.

#include <immintrin.h>

#include <cmath>

#include "latentmark/kernels/image_kernels.hpp"

namespace latentmark::kernels {
namespace {

// Horizontal sum of four doubles.
inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

// acc += widen(v)^2, lane-split into two double accumulators.
inline void accumulate_sq(__m256 v, __m256d& lo, __m256d& hi) {
  const __m256d a = _mm256_cvtps_pd(_mm256_castps256_ps128(v));
  const __m256d b = _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1));
  lo = _mm256_fmadd_pd(a, a, lo);
  hi = _mm256_fmadd_pd(b, b, hi);
}

inline __m256 abs_ps(__m256 v) { return _mm256_andnot_ps(_mm256_set1_ps(-0.0f), v); }

void blend(std::span<const float> x, std::span<const float> m, float lambda, std::size_t channels,
           std::span<float> out) {
  const std::size_t plane = m.size();
  const float keep = 1.0f - lambda;
  const __m256 vkeep = _mm256_set1_ps(keep);
  const __m256 vlam = _mm256_set1_ps(lambda);
  for (std::size_t c = 0; c < channels; ++c) {
    const float* xs = x.data() + c * plane;
    float* os = out.data() + c * plane;
    std::size_t i = 0;
    for (; i + 8 <= plane; i += 8) {
      const __m256 a = _mm256_mul_ps(_mm256_loadu_ps(xs + i), vkeep);
      const __m256 b = _mm256_mul_ps(_mm256_loadu_ps(m.data() + i), vlam);
      _mm256_storeu_ps(os + i, _mm256_add_ps(a, b));
    }
    for (; i < plane; ++i) os[i] = xs[i] * keep + m[i] * lambda;
  }
}

void blend_alpha(std::span<const float> x, std::span<const float> pattern,
                 std::span<const float> alpha, std::size_t channels, std::span<float> out) {
  const std::size_t plane = alpha.size();
  const __m256 one = _mm256_set1_ps(1.0f);
  for (std::size_t c = 0; c < channels; ++c) {
    const float* xs = x.data() + c * plane;
    float* os = out.data() + c * plane;
    std::size_t i = 0;
    for (; i + 8 <= plane; i += 8) {
      const __m256 al = _mm256_loadu_ps(alpha.data() + i);
      const __m256 a = _mm256_mul_ps(_mm256_loadu_ps(xs + i), _mm256_sub_ps(one, al));
      const __m256 b = _mm256_mul_ps(_mm256_loadu_ps(pattern.data() + i), al);
      _mm256_storeu_ps(os + i, _mm256_add_ps(a, b));
    }
    for (; i < plane; ++i) os[i] = xs[i] * (1.0f - alpha[i]) + pattern[i] * alpha[i];
  }
}

double hinge_sq_sum(std::span<const float> a, std::span<const float> b, float eps) {
  const __m256 veps = _mm256_set1_ps(eps);
  const __m256 zero = _mm256_setzero_ps();
  __m256d lo = _mm256_setzero_pd();
  __m256d hi = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= a.size(); i += 8) {
    const __m256 d = _mm256_sub_ps(_mm256_loadu_ps(a.data() + i), _mm256_loadu_ps(b.data() + i));
    const __m256 h = _mm256_max_ps(_mm256_sub_ps(abs_ps(d), veps), zero);
    accumulate_sq(h, lo, hi);
  }
  double acc = hsum(_mm256_add_pd(lo, hi));
  for (; i < a.size(); ++i) {
    const float d = std::fabs(a[i] - b[i]) - eps;
    if (d > 0.0f) acc += static_cast<double>(d) * d;
  }
  return acc;
}

double sq_diff_sum(std::span<const float> a, std::span<const float> b) {
  __m256d lo = _mm256_setzero_pd();
  __m256d hi = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= a.size(); i += 8) {
    accumulate_sq(_mm256_sub_ps(_mm256_loadu_ps(a.data() + i), _mm256_loadu_ps(b.data() + i)), lo,
                  hi);
  }
  double acc = hsum(_mm256_add_pd(lo, hi));
  for (; i < a.size(); ++i) {
    const float d = a[i] - b[i];
    acc += static_cast<double>(d) * d;
  }
  return acc;
}

double sq_dev_sum(std::span<const float> a, float s) {
  const __m256 vs = _mm256_set1_ps(s);
  __m256d lo = _mm256_setzero_pd();
  __m256d hi = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= a.size(); i += 8) accumulate_sq(_mm256_sub_ps(_mm256_loadu_ps(a.data() + i), vs), lo, hi);
  double acc = hsum(_mm256_add_pd(lo, hi));
  for (; i < a.size(); ++i) {
    const float d = a[i] - s;
    acc += static_cast<double>(d) * d;
  }
  return acc;
}

double abs_sum(std::span<const float> a) {
  __m256d lo = _mm256_setzero_pd();
  __m256d hi = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= a.size(); i += 8) {
    const __m256 v = abs_ps(_mm256_loadu_ps(a.data() + i));
    lo = _mm256_add_pd(lo, _mm256_cvtps_pd(_mm256_castps256_ps128(v)));
    hi = _mm256_add_pd(hi, _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1)));
  }
  double acc = hsum(_mm256_add_pd(lo, hi));
  for (; i < a.size(); ++i) acc += std::fabs(a[i]);
  return acc;
}

// Vectorized across output columns; tap order matches the scalar reference so
// results are bit-identical.
void filter_rows_valid(std::span<const float> in, std::size_t rows, std::size_t cols,
                       std::span<const float> taps, std::span<float> out) {
  const std::size_t k = taps.size();
  const std::size_t oc = cols - k + 1;
  for (std::size_t r = 0; r < rows; ++r) {
    const float* src = in.data() + r * cols;
    float* dst = out.data() + r * oc;
    std::size_t j = 0;
    for (; j + 8 <= oc; j += 8) {
      __m256 acc = _mm256_setzero_ps();
      for (std::size_t t = 0; t < k; ++t)
        acc = _mm256_fmadd_ps(_mm256_set1_ps(taps[t]), _mm256_loadu_ps(src + j + t), acc);
      _mm256_storeu_ps(dst + j, acc);
    }
    for (; j < oc; ++j) {
      float acc = 0.0f;
      for (std::size_t t = 0; t < k; ++t) acc = std::fma(taps[t], src[j + t], acc);
      dst[j] = acc;
    }
  }
}

void filter_cols_valid(std::span<const float> in, std::size_t rows, std::size_t cols,
                       std::span<const float> taps, std::span<float> out) {
  const std::size_t k = taps.size();
  const std::size_t orows = rows - k + 1;
  for (std::size_t r = 0; r < orows; ++r) {
    float* dst = out.data() + r * cols;
    std::size_t j = 0;
    for (; j + 8 <= cols; j += 8) {
      __m256 acc = _mm256_setzero_ps();
      for (std::size_t t = 0; t < k; ++t)
        acc = _mm256_fmadd_ps(_mm256_set1_ps(taps[t]), _mm256_loadu_ps(in.data() + (r + t) * cols + j),
                              acc);
      _mm256_storeu_ps(dst + j, acc);
    }
    for (; j < cols; ++j) {
      float acc = 0.0f;
      for (std::size_t t = 0; t < k; ++t) acc = std::fma(taps[t], in[(r + t) * cols + j], acc);
      dst[j] = acc;
    }
  }
}

void mul(std::span<const float> a, std::span<const float> b, std::span<float> out) {
  std::size_t i = 0;
  for (; i + 8 <= a.size(); i += 8)
    _mm256_storeu_ps(out.data() + i,
                     _mm256_mul_ps(_mm256_loadu_ps(a.data() + i), _mm256_loadu_ps(b.data() + i)));
  for (; i < a.size(); ++i) out[i] = a[i] * b[i];
}

}  // namespace

const KernelTable& avx2_table() {
  static const KernelTable table{
      Isa::kAvx2, blend,         blend_alpha,       hinge_sq_sum,      sq_diff_sum,
      sq_dev_sum, abs_sum,       filter_rows_valid, filter_cols_valid, mul,
  };
  return table;
}

}  // namespace latentmark::kernels
