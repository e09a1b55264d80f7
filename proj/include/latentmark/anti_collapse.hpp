// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

// Corruption operations applied to poisoned images while the injector and
// extractor train, and reused as the fixed test-time conditions.

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

namespace latentmark {

enum class OpKind { kRandomMask, kRescale, kNoise, kRotate, kIdentity };

std::string to_string(OpKind k);
OpKind parse_op_kind(const std::string& s);

struct AntiCollapseOp {
  OpKind kind = OpKind::kIdentity;
  double probability = 0.5;
  double mask_fraction = 0.25;
  double scale_min = 0.5;
  double scale_max = 2.0;
  double noise_sigma = 0.05;
  double max_angle_deg = 15.0;

  void validate() const;  // ConfigError
  nlohmann::json to_json() const;
  static AntiCollapseOp from_json(const nlohmann::json& j);
};

struct AntiCollapseSet {
  std::vector<AntiCollapseOp> ops;
  uint64_t seed = 0;

  // MASK -> ROTATE -> NOISE -> RESCALE, each with p = 0.5.
  static AntiCollapseSet standard(uint64_t seed);

  void validate() const;
  nlohmann::json to_json() const;
  static AntiCollapseSet from_json(const nlohmann::json& j);
};

// Applies each op in order, gated by an independent Bernoulli(p_k) draw from
// a stream keyed on (seed, step, k). Differentiable in `x` except through
// masked pixels; the result is clamped to [0, 1] and has the input's shape.
torch::Tensor apply_set(const AntiCollapseSet& set, const torch::Tensor& x, int64_t step);

// Whether op k fires at `step` (exposed for the gating statistics test).
bool op_fires(const AntiCollapseSet& set, std::size_t k, int64_t step);

// Primitive corruptions on (N,C,H,W) batches. Parameters are drawn from `rng`
// where random.
//
// Zeros one contiguous rectangle per image covering exactly
// round(fraction * H * W) pixels (the last row of the rectangle may be partial).
torch::Tensor random_mask(const torch::Tensor& x, double fraction, std::mt19937_64& rng);
// Bilinear resize to round(scale * H) x round(scale * W) and back.
torch::Tensor rescale(const torch::Tensor& x, double scale);
torch::Tensor add_noise(const torch::Tensor& x, double sigma, uint64_t seed);
// Rotates each image about its centre by angles_deg[i], zero fill, bilinear.
torch::Tensor rotate(const torch::Tensor& x, const std::vector<double>& angles_deg);

// Test-time single-corruption conditions.
enum class EvalCondition { kNone, kRM, kRo, kNoise, kRS };

std::string to_string(EvalCondition c);
EvalCondition parse_condition(const std::string& s);  // ConfigError on unknown names
const std::vector<EvalCondition>& all_conditions();   // None, RM, Ro, Noise, RS

struct EvalCorruptionParams {
  double mask_fraction = 0.25;
  double max_angle_deg = 15.0;
  double noise_sigma = 0.05;
  double scale_min = 0.5;
  double scale_max = 2.0;
  uint64_t seed = 20240101;
};

// Deterministic single corruption. Each image's parameters (mask position,
// angle, noise field, scale) come from a stream keyed on the condition and a
// hash of the image's own bytes, so an image is corrupted identically
// wherever it sits in a batch or test set.
torch::Tensor corruption_for_eval(EvalCondition condition, const torch::Tensor& x,
                                  const EvalCorruptionParams& params = {});

}  // namespace latentmark
