// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end training of injector, extractor and watermark under
// L = lambda1 * L_inj + lambda2 * L_ext, with the anti-collapse set applied to
// the poisoned branch before extraction.

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "json.hpp"
#include "latentmark/anti_collapse.hpp"
#include "latentmark/data.hpp"
#include "latentmark/extractor.hpp"
#include "latentmark/injector.hpp"
#include "latentmark/optim.hpp"

namespace latentmark {

struct JointLossConfig {
  double lambda1 = 1.0;
  double lambda2 = 0.1;
  double epsilon = 1.0 / 255.0;

  void validate() const;  // ConfigError
  nlohmann::json to_json() const;
  static JointLossConfig from_json(const nlohmann::json& j);
  bool operator==(const JointLossConfig&) const = default;
};

struct TrainSchedule {
  int64_t iterations = 10000;
  OptimizerSpec optimizer;  // SGD lr 2e-4 momentum 0.5
  int64_t batch_size = 16;
  uint64_t seed = 0;
  int64_t log_every = 50;
  int64_t checkpoint_every = 1000;
  bool cosine_decay = false;  // lr * (1 + cos(pi * step / iterations)) / 2

  double learning_rate(int64_t step) const;

  void validate() const;  // ConfigError
  nlohmann::json to_json() const;
  static TrainSchedule from_json(const nlohmann::json& j);
  bool operator==(const TrainSchedule&) const = default;
};

// lambda1 * l1 + lambda2 * l2. ContractError if either term is negative or
// non-finite.
double total_loss(double l1, double l2, const JointLossConfig& cfg);
torch::Tensor total_loss(const torch::Tensor& l1, const torch::Tensor& l2, const JointLossConfig& cfg);

struct JointState {
  InjectorState injector;
  ExtractorConfig extractor_config;
  TriggerExtractor extractor{nullptr};

  static JointState create(const InjectorConfig& icfg, const ExtractorConfig& ecfg, uint64_t seed);
};

void save_joint(const JointState& state, const std::filesystem::path& path,
                const torch::optim::Optimizer* optimizer = nullptr);
// Restores networks and, when given and present, optimizer state.
JointState load_joint(const std::filesystem::path& path, torch::optim::Optimizer* optimizer = nullptr);

struct JointLogRecord {
  int64_t step = 0;
  double l1 = 0.0;
  double l2 = 0.0;
  double loss = 0.0;

  nlohmann::json to_json() const { return {{"step", step}, {"L1", l1}, {"L2", l2}, {"L", loss}}; }
};

struct JointTrainOptions {
  // When set, the training log (JSONL), periodic and final checkpoints are
  // written here as joint_log.jsonl, joint_latest.ckpt (with optimizer state,
  // every checkpoint_every steps) and joint.ckpt.
  std::optional<std::filesystem::path> out_dir;
  // Continue from out_dir/joint_latest.ckpt when it exists.
  bool resume = false;
  std::function<void(const JointLogRecord&)> on_log;
};

struct JointResult {
  JointState state;
  std::vector<JointLogRecord> history;  // one record per step run in this call
};

// Batch at step s holds dataset positions s*B .. s*B+B-1 taken through a
// per-epoch seeded permutation, so sampling is a pure function of
// (seed, step) and resumption reproduces the uninterrupted run. On a
// non-finite loss the pre-step parameters are written to
// out_dir/joint_last_good.ckpt and NumericError is thrown.
JointResult train_joint(const Dataset& data, const InjectorConfig& icfg, const ExtractorConfig& ecfg,
                        const AntiCollapseSet& anti, const JointLossConfig& loss_cfg, const TrainSchedule& schedule,
                        const JointTrainOptions& options = {});

// Dataset positions used by step `step` (exposed for tests).
std::vector<int64_t> batch_indices(int64_t dataset_size, int64_t batch_size, uint64_t seed, int64_t step);

}  // namespace latentmark
