// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numbers>

#include "latentmark/data.hpp"
#include "latentmark/errors.hpp"
#include "latentmark/rng.hpp"

namespace latentmark {
namespace {

constexpr int64_t kMaxSyntheticClasses = 10;

// Box-Muller on our own uniform source so the stream is library-independent.
float gaussian(std::mt19937_64& rng) {
  const double u1 = std::max(uniform01(rng), 1e-300);
  const double u2 = uniform01(rng);
  return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2));
}

// Shape membership for class `c` at offset (dx, dy) from the centre with
// characteristic radius r.
bool in_shape(int64_t c, float dx, float dy, float r) {
  const float ax = std::fabs(dx), ay = std::fabs(dy);
  switch (c) {
    case 0:  // filled square
      return ax < r && ay < r;
    case 1:  // disk
      return dx * dx + dy * dy < r * r;
    case 2:  // plus
      return (ax < r / 3 && ay < r) || (ay < r / 3 && ax < r);
    case 3:  // upward triangle
      return dy < r && dy > -r && ax < (r + dy) / 2;
    case 4: {  // ring
      const float d2 = dx * dx + dy * dy;
      return d2 < r * r && d2 > 0.36f * r * r;
    }
    case 5:  // two horizontal bars
      return ax < r && (std::fabs(dy - r / 2) < r / 5 || std::fabs(dy + r / 2) < r / 5);
    case 6:  // two vertical bars
      return ay < r && (std::fabs(dx - r / 2) < r / 5 || std::fabs(dx + r / 2) < r / 5);
    case 7:  // thick diagonal
      return ax < r && ay < r && std::fabs(dx - dy) < r / 3;
    case 8:  // X
      return ax < r && ay < r && (std::fabs(dx - dy) < r / 4 || std::fabs(dx + dy) < r / 4);
    case 9:  // diamond
      return ax + ay < r;
    default:
      return false;
  }
}

}  // namespace

Dataset make_synthetic(int64_t count, int64_t num_classes, int64_t size, uint64_t seed, Split split) {
  if (count < 0) throw ConfigError("synthetic: count must be >= 0");
  if (num_classes < 2 || num_classes > kMaxSyntheticClasses)
    throw ConfigError("synthetic: classes must be in [2, 10]");
  if (size < 8) throw ConfigError("synthetic: image size must be >= 8");

  Dataset d;
  d.name = "synthetic";
  d.num_classes = num_classes;
  d.images = torch::empty({count, 3, size, size});
  d.labels = torch::empty({count}, torch::kInt64);
  float* px = d.images.data_ptr<float>();
  int64_t* lab = d.labels.data_ptr<int64_t>();
  const int64_t plane = size * size;
  const auto s = static_cast<float>(size);

  for (int64_t i = 0; i < count; ++i) {
    // Train and test draw from disjoint streams.
    std::mt19937_64 rng(derive_seed({seed, split == Split::kTrain ? 0x7ULL : 0x11ULL, static_cast<uint64_t>(i)}));
    const auto c = static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(num_classes)));
    lab[i] = c;

    float bg0[3], bg1[3], fg[3];
    for (float& v : bg0) v = static_cast<float>(uniform01(rng));
    for (float& v : bg1) v = static_cast<float>(uniform01(rng));
    const float bg_mean = (bg0[0] + bg0[1] + bg0[2] + bg1[0] + bg1[1] + bg1[2]) / 6.0f;
    // Foreground brightness sits on the far side of the background mean.
    const float fg_base = bg_mean > 0.5f ? 0.0f : 0.55f;
    for (float& v : fg) v = fg_base + 0.45f * static_cast<float>(uniform01(rng));
    const double angle = uniform_real(rng, 0.0, 2.0 * std::numbers::pi);
    const auto ca = static_cast<float>(std::cos(angle)), sa = static_cast<float>(std::sin(angle));
    const auto cx = static_cast<float>(uniform_real(rng, 0.3 * s, 0.7 * s));
    const auto cy = static_cast<float>(uniform_real(rng, 0.3 * s, 0.7 * s));
    const auto r = static_cast<float>(uniform_real(rng, 0.18 * s, 0.32 * s));

    float* img = px + i * 3 * plane;
    for (int64_t y = 0; y < size; ++y) {
      for (int64_t x = 0; x < size; ++x) {
        const float fx = static_cast<float>(x) + 0.5f, fy = static_cast<float>(y) + 0.5f;
        const float t = std::clamp(((fx - s / 2) * ca + (fy - s / 2) * sa) / s + 0.5f, 0.0f, 1.0f);
        const bool inside = in_shape(c, fx - cx, fy - cy, r);
        for (int64_t ch = 0; ch < 3; ++ch) {
          float v = inside ? fg[ch] : bg0[ch] * (1.0f - t) + bg1[ch] * t;
          v += 0.03f * gaussian(rng);
          img[ch * plane + y * size + x] = std::clamp(v, 0.0f, 1.0f);
        }
      }
    }
  }
  return d;
}

}  // namespace latentmark
