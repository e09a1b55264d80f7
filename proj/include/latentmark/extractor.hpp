// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

#include "json.hpp"

namespace latentmark {

struct ExtractorConfig {
  int64_t in_channels = 3;
  int64_t depth = 3;          // down/up stages
  int64_t base_channels = 32; // doubles per down stage
  int64_t supervised_levels = 3;

  void validate() const;  // ConfigError
  nlohmann::json to_json() const;
  static ExtractorConfig from_json(const nlohmann::json& j);
  bool operator==(const ExtractorConfig&) const = default;
};

// One single-channel map per supervised decoder stage, ordered coarsest to
// finest, each bilinearly resized to the input's H x W. maps.back() is the
// finest level.
struct ExtractionResult {
  std::vector<torch::Tensor> maps;  // each (N, 1, H, W)

  const torch::Tensor& finest() const { return maps.back(); }
};

// Bilinear resize (half-pixel centres, no corner alignment) of an (N,C,h,w)
// tensor to (N,C,H,W).
torch::Tensor bilinear_resize(const torch::Tensor& x, int64_t height, int64_t width);

// UNet-like extractor: conv stem, `depth` max-pool down stages, `depth`
// transposed-conv up stages with skip concatenation, and a 1x1 projection to
// one channel on each of the last `supervised_levels` up stages.
class TriggerExtractorImpl : public torch::nn::Module {
 public:
  TriggerExtractorImpl(const ExtractorConfig& config, uint64_t seed);

  ExtractionResult forward(const torch::Tensor& x);
  const ExtractorConfig& config() const { return config_; }

 private:
  ExtractorConfig config_;
  torch::nn::Sequential stem_{nullptr};
  std::vector<torch::nn::Sequential> down_;
  std::vector<torch::nn::ConvTranspose2d> up_;
  std::vector<torch::nn::Sequential> up_conv_;
  std::vector<torch::nn::Conv2d> heads_;
};
TORCH_MODULE(TriggerExtractor);

// Checks finiteness of the maps (NumericError) and runs without autograd.
ExtractionResult extract(TriggerExtractor& net, const torch::Tensor& x);

// Sum over levels of mean_{N,H,W}[(poisoned_l - m)^2 + clean_l^2].
// ShapeError when level counts or spatial sizes disagree.
torch::Tensor extractor_loss(const ExtractionResult& poisoned, const ExtractionResult& clean, const torch::Tensor& m);

// The same loss for one level; extractor_loss is the sum of these.
torch::Tensor extractor_level_loss(const torch::Tensor& poisoned_map, const torch::Tensor& clean_map,
                                   const torch::Tensor& m);

}  // namespace latentmark
