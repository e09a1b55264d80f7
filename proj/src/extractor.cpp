// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include "latentmark/extractor.hpp"

#include "latentmark/errors.hpp"
#include "latentmark/injector.hpp"

namespace F = torch::nn::functional;

namespace latentmark {

void ExtractorConfig::validate() const {
  if (in_channels < 1) throw ConfigError("extractor: in_channels must be >= 1");
  if (base_channels < 1) throw ConfigError("extractor: base_channels must be >= 1");
  if (supervised_levels < 1) throw ConfigError("extractor: supervised_levels must be >= 1");
  if (depth < supervised_levels) throw ConfigError("extractor: depth must be >= supervised_levels");
}

nlohmann::json ExtractorConfig::to_json() const {
  return {{"in_channels", in_channels},
          {"depth", depth},
          {"base_channels", base_channels},
          {"supervised_levels", supervised_levels}};
}

ExtractorConfig ExtractorConfig::from_json(const nlohmann::json& j) {
  ExtractorConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.depth = j.value("depth", c.depth);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.supervised_levels = j.value("supervised_levels", c.supervised_levels);
  return c;
}

torch::Tensor bilinear_resize(const torch::Tensor& x, int64_t height, int64_t width) {
  if (x.size(2) == height && x.size(3) == width) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{height, width})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

namespace {

torch::nn::Sequential conv_block(int64_t in, int64_t out) {
  return torch::nn::Sequential(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)),
                               torch::nn::ReLU(),
                               torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1)),
                               torch::nn::ReLU());
}

}  // namespace

TriggerExtractorImpl::TriggerExtractorImpl(const ExtractorConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  torch::manual_seed(seed);
  const int64_t c = config_.base_channels;
  stem_ = register_module("stem", conv_block(config_.in_channels, c));
  for (int64_t i = 0; i < config_.depth; ++i) {
    const int64_t in = c << i;
    down_.push_back(register_module("down" + std::to_string(i), conv_block(in, 2 * in)));
  }
  // Up stage i goes from resolution level depth-i to depth-i-1.
  for (int64_t i = 0; i < config_.depth; ++i) {
    const int64_t in = c << (config_.depth - i);
    up_.push_back(register_module("up" + std::to_string(i),
                                  torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in, in / 2, 2).stride(2))));
    up_conv_.push_back(register_module("up_conv" + std::to_string(i), conv_block(in, in / 2)));
  }
  for (int64_t l = 0; l < config_.supervised_levels; ++l) {
    const int64_t stage = config_.depth - config_.supervised_levels + l;
    const int64_t ch = c << (config_.depth - stage - 1);
    heads_.push_back(register_module("head" + std::to_string(l), torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, 1, 1))));
  }
}

ExtractionResult TriggerExtractorImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != config_.in_channels)
    throw ShapeError("extractor expects (N," + std::to_string(config_.in_channels) + ",H,W), got " + c10::str(x.sizes()));
  const int64_t factor = int64_t{1} << config_.depth;
  if (x.size(2) % factor != 0 || x.size(3) % factor != 0)
    throw ShapeError("extractor input H, W must be divisible by " + std::to_string(factor));
  std::vector<torch::Tensor> skips;
  auto h = stem_->forward(x);
  for (auto& down : down_) {
    skips.push_back(h);
    h = down->forward(F::max_pool2d(h, F::MaxPool2dFuncOptions(2)));
  }
  ExtractionResult result;
  const int64_t first_supervised = config_.depth - config_.supervised_levels;
  for (int64_t i = 0; i < config_.depth; ++i) {
    h = up_[i]->forward(h);
    h = up_conv_[i]->forward(torch::cat({h, skips[config_.depth - 1 - i]}, 1));
    if (i >= first_supervised)
      result.maps.push_back(bilinear_resize(heads_[i - first_supervised]->forward(h), x.size(2), x.size(3)));
  }
  return result;
}

ExtractionResult extract(TriggerExtractor& net, const torch::Tensor& x) {
  torch::NoGradGuard no_grad;
  auto r = net->forward(x.to(torch::kFloat32));
  for (const auto& m : r.maps) require_finite(m, "extractor map");
  return r;
}

torch::Tensor extractor_level_loss(const torch::Tensor& poisoned_map, const torch::Tensor& clean_map,
                                   const torch::Tensor& m) {
  if (poisoned_map.sizes() != clean_map.sizes()) throw ShapeError("extractor_loss: poisoned/clean map shapes differ");
  const int64_t h = poisoned_map.size(-2), w = poisoned_map.size(-1);
  if (m.size(-2) != h || m.size(-1) != w) throw ShapeError("extractor_loss: watermark spatial size differs from maps");
  // Watermark (1,H,W) broadcasts over (N,1,H,W).
  return (poisoned_map - m).pow(2).mean() + clean_map.pow(2).mean();
}

torch::Tensor extractor_loss(const ExtractionResult& poisoned, const ExtractionResult& clean, const torch::Tensor& m) {
  if (poisoned.maps.empty() || poisoned.maps.size() != clean.maps.size())
    throw ShapeError("extractor_loss: level count mismatch (" + std::to_string(poisoned.maps.size()) + " vs " +
                     std::to_string(clean.maps.size()) + ")");
  torch::Tensor total = extractor_level_loss(poisoned.maps[0], clean.maps[0], m);
  for (std::size_t l = 1; l < poisoned.maps.size(); ++l)
    total = total + extractor_level_loss(poisoned.maps[l], clean.maps[l], m);
  return total;
}

}  // namespace latentmark
