// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

// Transformer trigger injector. A clean image is patch-embedded and encoded;
// the flattened watermark is projected to one token-sized vector that is
// added to every encoder token; a token-wise MLP mixes the sum; a shallow
// transformer decoder and a linear un-patching head with a sigmoid produce the
// poisoned image in [0, 1].

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

namespace latentmark {

struct Watermark {
  torch::Tensor values;  // (1, H, W)
  bool learnable = true;
};

struct InjectorConfig {
  int64_t channels = 3;
  int64_t height = 32;
  int64_t width = 32;
  int64_t patch_size = 4;
  int64_t embed_dim = 192;
  int64_t encoder_depth = 6;
  int64_t decoder_depth = 2;
  int64_t heads = 3;
  int64_t mlp_ratio = 4;
  int64_t trigger_proj_layers = 3;
  double epsilon = 1.0 / 255.0;
  // Optimization aids. fuse_residual adds the MLP input back onto its output;
  // output_norm keeps a LayerNorm before the pixel head; zero_init_residual
  // starts every transformer residual branch at zero.
  bool fuse_residual = true;
  bool output_norm = false;
  bool zero_init_residual = true;

  static InjectorConfig desk(int64_t channels, int64_t height, int64_t width);
  // 24 encoder / 8 decoder blocks.
  static InjectorConfig paper(int64_t channels, int64_t height, int64_t width);

  int64_t tokens() const { return (height / patch_size) * (width / patch_size); }
  void validate() const;  // ConfigError
  nlohmann::json to_json() const;
  static InjectorConfig from_json(const nlohmann::json& j);
  bool operator==(const InjectorConfig&) const = default;
};

// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int64_t dim, int64_t heads, int64_t mlp_ratio, bool zero_init = false);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  int64_t heads_;
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Linear qkv_{nullptr}, proj_{nullptr}, fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(TransformerBlock);

class TriggerInjectorImpl : public torch::nn::Module {
 public:
  TriggerInjectorImpl(const InjectorConfig& config, uint64_t seed);

  // (N,C,H,W) -> (N,C,H,W) in [0,1]; differentiable in the inputs, the
  // network weights and the watermark.
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor& watermark() { return watermark_; }
  const torch::Tensor& watermark() const { return watermark_; }
  const InjectorConfig& config() const { return config_; }

  // Keeps the watermark in [0,1]; call after every optimizer step.
  void clamp_watermark();

  torch::Tensor patchify(const torch::Tensor& x) const;
  torch::Tensor unpatchify(const torch::Tensor& tokens) const;

 private:
  InjectorConfig config_;
  torch::nn::Linear patch_embed_{nullptr};
  torch::Tensor pos_embed_;
  torch::nn::Sequential encoder_{nullptr};
  torch::nn::Linear trigger_embed_{nullptr};  // flattened watermark -> one D-vector
  torch::nn::Sequential fuse_mlp_{nullptr};   // token-wise MLP after the addition
  torch::nn::Sequential decoder_{nullptr};
  torch::nn::LayerNorm out_norm_{nullptr};
  torch::nn::Linear out_proj_{nullptr};
  torch::Tensor watermark_;
};
TORCH_MODULE(TriggerInjector);

struct InjectorState {
  InjectorConfig config;
  TriggerInjector net{nullptr};
  int64_t step = 0;
  uint64_t seed = 0;

  static InjectorState create(const InjectorConfig& config, uint64_t seed);
  Watermark watermark() const;
};

// Inference: checks shape and finiteness, runs without autograd.
// ShapeError on spatial mismatch, NumericError on non-finite output.
torch::Tensor inject(const InjectorState& state, const torch::Tensor& x);

// mean over batch, channels and pixels of relu(|x' - x| - eps)^2.
torch::Tensor injector_loss(const torch::Tensor& x, const torch::Tensor& x_prime, double epsilon);

void save_injector(const InjectorState& state, const std::filesystem::path& path);
// With `expected`, a differing stored config raises ConfigError.
InjectorState load_injector(const std::filesystem::path& path, const InjectorConfig* expected = nullptr);

// Raises NumericError naming `what` and `step` if `t` holds NaN/Inf.
void require_finite(const torch::Tensor& t, const std::string& what, int64_t step = -1);

}  // namespace latentmark
