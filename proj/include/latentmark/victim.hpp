// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentmark/data.hpp"
#include "latentmark/optim.hpp"

namespace latentmark {

enum class Architecture { kSmallResNet, kResNet18 };

std::string to_string(Architecture a);
Architecture parse_architecture(const std::string& s);  // SMALL_RESNET | RESNET18

struct VictimConfig {
  Architecture architecture = Architecture::kSmallResNet;
  int64_t epochs = 100;
  OptimizerSpec optimizer{OptimizerKind::kSgd, 0.1, 0.9, 5e-4};
  int64_t batch_size = 128;
  bool augment = true;  // random 4px-padded crop + horizontal flip
  int64_t small_blocks_per_stage = 3;
  // Victim checkpoint to start from (empty = random init). Tensors whose name
  // and shape match are copied, so a head with another class count stays fresh.
  std::string init_weights;
  uint64_t seed = 0;

  void validate() const;  // ConfigError
  nlohmann::json to_json() const;
  static VictimConfig from_json(const nlohmann::json& j);
  bool operator==(const VictimConfig&) const = default;
};

// Anything that maps (N,C,H,W) images to (N,K) logits.
class ClassifierImpl : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& x) = 0;
};
using Classifier = std::shared_ptr<ClassifierImpl>;

// CIFAR-style residual network: 3x3 stem, three stages of basic blocks at
// widths 16/32/64 (strides 1/2/2), global average pool, linear head.
Classifier make_small_resnet(int64_t channels, int64_t num_classes, int64_t blocks_per_stage);
// ResNet-18 (2-2-2-2 basic blocks, widths 64..512). Inputs below 64 px use a
// 3x3 stride-1 stem without max-pooling; larger inputs the 7x7/2 + pool stem.
Classifier make_resnet18(int64_t channels, int64_t num_classes, int64_t height);

struct VictimState {
  VictimConfig config;
  int64_t num_classes = 0;
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
  Classifier net;

  static VictimState create(const VictimConfig& cfg, int64_t channels, int64_t height, int64_t width,
                            int64_t num_classes);
};

// lr0 * (1 + cos(pi * epoch / epochs)) / 2.
double cosine_lr(double lr0, int64_t epoch, int64_t epochs);

struct VictimEpochRecord {
  int64_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double accuracy = 0.0;  // percent, on the (augmented) training stream

  nlohmann::json to_json() const { return {{"epoch", epoch}, {"lr", lr}, {"loss", loss}, {"accuracy", accuracy}}; }
};

struct VictimTrainOptions {
  std::optional<std::filesystem::path> out_dir;  // victim_metrics.jsonl, victim.ckpt
  // Called with the logits of every training batch before the update.
  std::function<void(int64_t epoch, int64_t batch, const torch::Tensor& logits)> on_batch;
  // Stop after this many batches in total (0 = no limit); for micro runs.
  int64_t max_batches = 0;
};

struct VictimResult {
  VictimState state;
  std::vector<VictimEpochRecord> history;
};

// Cross-entropy training over `train` (already mixed clean + poisoned).
// Aborts with NumericError on a non-finite loss or when the epoch loss stays
// above 10x the first epoch's loss for three consecutive epochs.
VictimResult train_victim(const Dataset& train, const VictimConfig& cfg, const VictimTrainOptions& options = {});

// Epoch-e visiting order; depends only on (n, seed, epoch).
std::vector<int64_t> victim_batch_order(int64_t n, uint64_t seed, int64_t epoch);

// Argmax class per image in eval mode. ShapeError on a resolution mismatch.
torch::Tensor predict(ClassifierImpl& net, const torch::Tensor& x, int64_t batch_size = 256);
torch::Tensor predict(const VictimState& victim, const torch::Tensor& x);

void save_victim(const VictimState& state, const std::filesystem::path& path);
VictimState load_victim(const std::filesystem::path& path);

}  // namespace latentmark
