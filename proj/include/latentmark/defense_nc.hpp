// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

// Neural Cleanse detection: per-class minimal trigger reverse engineering and
// the MAD-based anomaly index over the resulting mask norms.

#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <vector>

#include "json.hpp"
#include "latentmark/data.hpp"
#include "latentmark/optim.hpp"
#include "latentmark/victim.hpp"

namespace latentmark {

struct DefenseConfig {
  double tau = 2.0;
  double mask_l1_weight = 1e-3;  // beta, fixed
  int64_t steps = 100;           // per class
  OptimizerSpec optimizer{OptimizerKind::kAdam, 0.1, 0.0, 0.0, 0.5, 0.9};
  int64_t clean_budget = 256;    // clean samples used for reverse engineering
  int64_t batch_size = 64;
  uint64_t seed = 0;

  void validate() const;  // ConfigError
  nlohmann::json to_json() const;
  static DefenseConfig from_json(const nlohmann::json& j);
  bool operator==(const DefenseConfig&) const = default;
};

struct ReversedTrigger {
  int64_t target = 0;
  torch::Tensor mask;     // (1,H,W) in [0,1]
  torch::Tensor pattern;  // (C,H,W) in [0,1]
  double mask_l1 = 0.0;   // sum of mask values
  double final_loss = 0.0;
  bool converged = true;  // false when the loss became non-finite
};

// Minimizes CE(f(x (1-M) + P M), c) + beta |M|_1 over tanh-parameterized M, P.
ReversedTrigger reverse_trigger(ClassifierImpl& victim, const torch::Tensor& clean_samples, int64_t target,
                                const DefenseConfig& cfg);

struct AnomalyResult {
  std::vector<double> indices;  // |v - median| / (1.4826 MAD), one per class
  std::size_t min_class = 0;    // class with the smallest norm
  double model_index = 0.0;     // index of min_class (0 when its norm is not below the median)
  bool degenerate = false;      // MAD == 0
};

// ContractError with fewer than 3 values.
AnomalyResult anomaly_index(const std::vector<double>& norms);

struct DefenseReport {
  std::vector<double> mask_l1;         // per class (NaN for failed classes)
  std::vector<bool> failed;            // per class
  std::vector<double> anomaly;         // per class, over the non-failed classes
  std::size_t flagged_class = 0;
  double model_index = 0.0;
  double tau = 2.0;
  bool degenerate = false;
  bool flagged = false;  // model_index > tau

  nlohmann::json to_json() const;
  static DefenseReport from_json(const nlohmann::json& j);
};

DefenseReport run_neural_cleanse(ClassifierImpl& victim, const Dataset& clean, const DefenseConfig& cfg,
                                 std::vector<ReversedTrigger>* triggers = nullptr);

void write_defense_report(const DefenseReport& report, const std::filesystem::path& path);

}  // namespace latentmark
