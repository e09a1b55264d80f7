// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

// Image-fidelity metrics between clean and poisoned batches. All take
// (N,C,H,W) tensors in [0,1] and average per-image scores over the batch.

#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "json.hpp"

namespace latentmark {

inline constexpr double kPsnrCapDb = 100.0;

// 10 log10(1 / MSE) per image, capped at 100 dB when MSE < 1e-10.
double psnr(const torch::Tensor& a, const torch::Tensor& b);
double psnr_from_mse(double mse);

// Windowed structural similarity: 11x11 Gaussian window (sigma 1.5, shrunk to
// the image when smaller), valid positions only, C1 = 0.01^2, C2 = 0.03^2,
// averaged over window positions, channels and images.
double ssim(const torch::Tensor& a, const torch::Tensor& b);

// Pluggable perceptual distance (LPIPS-style, >= 0, 0 for identical inputs).
class PerceptualDistance {
 public:
  virtual ~PerceptualDistance() = default;
  virtual double distance(const torch::Tensor& a, const torch::Tensor& b) = 0;
  virtual std::string name() const = 0;
  // False when numbers cannot be compared with published LPIPS values.
  virtual bool comparable() const = 0;
};

// Fixed-seed random convolutional features; unit-normalized per position,
// squared differences averaged spatially and summed over three layers.
// Deterministic but NOT comparable with pretrained LPIPS.
class RandomFeatureDistance final : public PerceptualDistance {
 public:
  explicit RandomFeatureDistance(int64_t channels = 3, uint64_t seed = 0x1b1b5);
  double distance(const torch::Tensor& a, const torch::Tensor& b) override;
  std::string name() const override { return "random-features"; }
  bool comparable() const override { return false; }

 private:
  std::vector<torch::Tensor> weights_;
};

// A TorchScript module whose forward(a, b) takes images scaled to [-1,1] and
// returns per-image distances (N) or (N,1,1,1) - e.g. an exported LPIPS net.
class TorchScriptDistance final : public PerceptualDistance {
 public:
  explicit TorchScriptDistance(const std::filesystem::path& module_path);
  ~TorchScriptDistance() override;
  double distance(const torch::Tensor& a, const torch::Tensor& b) override;
  std::string name() const override { return "torchscript:" + path_.filename().string(); }
  bool comparable() const override { return true; }

 private:
  struct Impl;
  std::filesystem::path path_;
  std::unique_ptr<Impl> impl_;
};

// TorchScript backend when `module_path` is given, else the random fallback.
std::unique_ptr<PerceptualDistance> make_perceptual_distance(const std::optional<std::filesystem::path>& module_path,
                                                             int64_t channels = 3);

struct StealthMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  double lpips = 0.0;
  std::string lpips_backend;
  bool lpips_comparable = false;

  nlohmann::json to_json() const;
  static StealthMetrics from_json(const nlohmann::json& j);
  bool operator==(const StealthMetrics&) const = default;
};

StealthMetrics measure_stealth(const torch::Tensor& clean, const torch::Tensor& poisoned, PerceptualDistance& lpips);

}  // namespace latentmark
