// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

namespace latentmark {

enum class OptimizerKind { kSgd, kAdam };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer_kind(const std::string& s);  // "SGD" | "ADAM"

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::kSgd;
  double lr = 2e-4;
  double momentum = 0.5;      // SGD only
  double weight_decay = 0.0;
  double beta1 = 0.9;         // Adam only
  double beta2 = 0.999;

  void validate(const std::string& where) const;  // ConfigError
  nlohmann::json to_json() const;
  static OptimizerSpec from_json(const nlohmann::json& j);
  // Compares only the fields the kind uses (momentum for SGD, betas for Adam).
  bool operator==(const OptimizerSpec& o) const;

  std::unique_ptr<torch::optim::Optimizer> make(const std::vector<torch::Tensor>& params) const;
};

// Sets the learning rate of every parameter group.
void set_learning_rate(torch::optim::Optimizer& opt, double lr);

// Optimizer state <-> bytes, for embedding in checkpoints.
std::string serialize_optimizer(const torch::optim::Optimizer& opt);
void deserialize_optimizer(torch::optim::Optimizer& opt, const std::string& bytes);

}  // namespace latentmark
