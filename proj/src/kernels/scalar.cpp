// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "latentmark/kernels/image_kernels.hpp"

namespace latentmark::kernels {
namespace {

void blend(std::span<const float> x, std::span<const float> m, float lambda, std::size_t channels,
           std::span<float> out) {
  const std::size_t plane = m.size();
  const float keep = 1.0f - lambda;
  for (std::size_t c = 0; c < channels; ++c) {
    const float* xs = x.data() + c * plane;
    float* os = out.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) os[i] = xs[i] * keep + m[i] * lambda;
  }
}

void blend_alpha(std::span<const float> x, std::span<const float> pattern,
                 std::span<const float> alpha, std::size_t channels, std::span<float> out) {
  const std::size_t plane = alpha.size();
  for (std::size_t c = 0; c < channels; ++c) {
    const float* xs = x.data() + c * plane;
    float* os = out.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) os[i] = xs[i] * (1.0f - alpha[i]) + pattern[i] * alpha[i];
  }
}

double hinge_sq_sum(std::span<const float> a, std::span<const float> b, float eps) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const float d = std::fabs(a[i] - b[i]) - eps;
    if (d > 0.0f) acc += static_cast<double>(d) * d;
  }
  return acc;
}

double sq_diff_sum(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const float d = a[i] - b[i];
    acc += static_cast<double>(d) * d;
  }
  return acc;
}

double sq_dev_sum(std::span<const float> a, float s) {
  double acc = 0.0;
  for (float v : a) {
    const float d = v - s;
    acc += static_cast<double>(d) * d;
  }
  return acc;
}

double abs_sum(std::span<const float> a) {
  double acc = 0.0;
  for (float v : a) acc += std::fabs(v);
  return acc;
}

void filter_rows_valid(std::span<const float> in, std::size_t rows, std::size_t cols,
                       std::span<const float> taps, std::span<float> out) {
  const std::size_t k = taps.size();
  const std::size_t oc = cols - k + 1;
  for (std::size_t r = 0; r < rows; ++r) {
    const float* src = in.data() + r * cols;
    float* dst = out.data() + r * oc;
    for (std::size_t j = 0; j < oc; ++j) {
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
    for (std::size_t j = 0; j < cols; ++j) {
      float acc = 0.0f;
      for (std::size_t t = 0; t < k; ++t) acc = std::fma(taps[t], in[(r + t) * cols + j], acc);
      dst[j] = acc;
    }
  }
}

void mul(std::span<const float> a, std::span<const float> b, std::span<float> out) {
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{
      Isa::kScalar, blend,         blend_alpha,       hinge_sq_sum,      sq_diff_sum,
      sq_dev_sum,   abs_sum,       filter_rows_valid, filter_cols_valid, mul,
  };
  return table;
}

}  // namespace latentmark::kernels
