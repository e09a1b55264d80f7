// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace latentmark {

struct LabeledExample {
  torch::Tensor image;  // (C, H, W), float32 in [0, 1]
  int64_t label = 0;
};

enum class Split { kTrain, kTest };

// Images are stored as one contiguous (N, C, H, W) float32 tensor so the
// pixel kernels and the networks can share it without copies.
struct Dataset {
  std::string name;
  torch::Tensor images;  // (N, C, H, W) float32, values in [0, 1]
  torch::Tensor labels;  // (N) int64
  int64_t num_classes = 0;

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
  int64_t channels() const { return images.size(1); }
  int64_t height() const { return images.size(2); }
  int64_t width() const { return images.size(3); }
  LabeledExample example(int64_t i) const;

  // Throws IngestionError if any pixel leaves [0, 1] or a label is out of range.
  void check_invariants() const;
};

struct DatasetSpec {
  std::string name = "synthetic";  // cifar10 | gtsrb | imagenet-subset | synthetic
  Split split = Split::kTrain;
  std::filesystem::path root;
  // Keep a seeded random subset of this many examples (0 = all).
  int64_t limit = 0;
  uint64_t seed = 0;
  // synthetic
  int64_t synthetic_count = 64;
  int64_t synthetic_classes = 4;
  int64_t synthetic_size = 32;
  // gtsrb images are resized to this square size
  int64_t gtsrb_size = 32;
  // imagenet-subset
  int64_t imagenet_classes = 10;
  int64_t imagenet_size = 224;

  nlohmann::json to_json() const;
  static DatasetSpec from_json(const nlohmann::json& j);
};

Split parse_split(const std::string& s);
std::string to_string(Split s);

// Unknown name -> ConfigError; missing/corrupt files -> IngestionError.
Dataset load_dataset(const DatasetSpec& spec);

// Deterministic procedural images: one shape family per class drawn over a
// random two-colour gradient with mild pixel noise. Supports up to 10 classes.
Dataset make_synthetic(int64_t count, int64_t num_classes, int64_t size, uint64_t seed, Split split);

// Seeded subset without replacement; order follows the original indices.
Dataset take_subset(const Dataset& d, int64_t n, uint64_t seed);

// Examples whose label differs from `label`.
Dataset exclude_label(const Dataset& d, int64_t label);

// x * (1 - lambda) + m * lambda. `x` is (C,H,W) or (N,C,H,W); `m` is (1,H,W)
// or (H,W) and is broadcast over channels (and batch).
torch::Tensor blend_inject(const torch::Tensor& x, const torch::Tensor& m, double lambda);

// Per-pixel variant used by the patch baseline: x * (1 - alpha) + pattern * alpha,
// `pattern` and `alpha` single-plane maps.
torch::Tensor blend_inject_alpha(const torch::Tensor& x, const torch::Tensor& pattern, const torch::Tensor& alpha);

enum class InjectionMode { kLearnedInjector, kLinearBlend };
std::string to_string(InjectionMode m);
InjectionMode parse_injection_mode(const std::string& s);

struct PoisonSpec {
  double ratio = 0.1;
  int64_t target_label = 0;
  double blend_factor = 0.2;
  InjectionMode mode = InjectionMode::kLearnedInjector;

  // Throws ConfigError; `num_classes` <= 0 skips the target-label range check.
  void validate(int64_t num_classes = 0) const;
  nlohmann::json to_json() const;
  static PoisonSpec from_json(const nlohmann::json& j);
};

// Trigger used by LINEAR_BLEND. An undefined alpha means the scalar
// blend_factor applies everywhere; a defined alpha map stamps a patch.
struct BlendTrigger {
  torch::Tensor pattern;  // (1, H, W)
  torch::Tensor alpha;    // (1, H, W) or undefined
};

// A 3x3 (by default) checkerboard patch in the bottom-right corner with
// alpha = 1 inside, used as the visible baseline for Neural Cleanse checks.
BlendTrigger make_patch_trigger(int64_t height, int64_t width, int64_t patch = 3, int64_t margin = 1);

// Batch transform x -> B(x) provided by a trained injector.
using InjectFn = std::function<torch::Tensor(const torch::Tensor&)>;

struct PoisonedDataset {
  Dataset data;
  std::vector<uint8_t> poison_mask;       // 1 where the example was replaced
  std::vector<int64_t> original_labels;   // labels before poisoning, every entry
  PoisonSpec spec;
  uint64_t seed = 0;

  int64_t poisoned_count() const;
  std::vector<int64_t> poisoned_indices() const;
};

// Selects round(ratio * N) examples uniformly without replacement (seeded),
// replaces them with B(x) and relabels them to the target. LEARNED_INJECTOR
// requires `injector`; LINEAR_BLEND requires `trigger`.
PoisonedDataset build_poisoned_dataset(const Dataset& clean, const PoisonSpec& spec, const InjectFn* injector,
                                       const BlendTrigger* trigger, uint64_t seed);

// Indices chosen for poisoning; exposed for the property tests.
std::vector<int64_t> select_poison_indices(int64_t n, double ratio, uint64_t seed);

// Reconstruction manifest: seed, ratio, target, mode, poisoned indices.
nlohmann::json poison_manifest(const PoisonedDataset& p);
void write_poison_manifest(const PoisonedDataset& p, const std::filesystem::path& path);

void save_poisoned_dataset(const PoisonedDataset& p, const std::filesystem::path& path);
PoisonedDataset load_poisoned_dataset(const std::filesystem::path& path);

void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset_file(const std::filesystem::path& path);

}  // namespace latentmark
