// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include "latentmark/injector.hpp"

#include <cmath>

#include "latentmark/checkpoint.hpp"
#include "latentmark/errors.hpp"

namespace latentmark {

InjectorConfig InjectorConfig::desk(int64_t channels, int64_t height, int64_t width) {
  InjectorConfig c;
  c.channels = channels;
  c.height = height;
  c.width = width;
  c.patch_size = height >= 224 ? 16 : 4;
  return c;
}

InjectorConfig InjectorConfig::paper(int64_t channels, int64_t height, int64_t width) {
  InjectorConfig c = desk(channels, height, width);
  c.encoder_depth = 24;
  c.decoder_depth = 8;
  c.fuse_residual = false;
  c.output_norm = true;
  c.zero_init_residual = false;
  return c;
}

void InjectorConfig::validate() const {
  if (channels < 1 || height < 1 || width < 1) throw ConfigError("injector: image dimensions must be positive");
  if (patch_size < 1 || height % patch_size != 0 || width % patch_size != 0)
    throw ConfigError("injector: H and W must be divisible by patch_size");
  if (encoder_depth < 1) throw ConfigError("injector: encoder_depth must be >= 1");
  if (decoder_depth < 1) throw ConfigError("injector: decoder_depth must be >= 1");
  if (heads < 1 || embed_dim % heads != 0) throw ConfigError("injector: embed_dim must be divisible by heads");
  if (mlp_ratio < 1) throw ConfigError("injector: mlp_ratio must be >= 1");
  if (trigger_proj_layers < 1) throw ConfigError("injector: trigger_proj_layers must be >= 1");
  if (!(epsilon >= 0.0)) throw ConfigError("injector: epsilon must be >= 0");
}

nlohmann::json InjectorConfig::to_json() const {
  return {{"channels", channels},         {"height", height},
          {"width", width},               {"patch_size", patch_size},
          {"embed_dim", embed_dim},       {"encoder_depth", encoder_depth},
          {"decoder_depth", decoder_depth}, {"heads", heads},
          {"mlp_ratio", mlp_ratio},       {"trigger_proj_layers", trigger_proj_layers},
          {"epsilon", epsilon},           {"fuse_residual", fuse_residual},
          {"output_norm", output_norm},   {"zero_init_residual", zero_init_residual}};
}

InjectorConfig InjectorConfig::from_json(const nlohmann::json& j) {
  InjectorConfig c;
  c.channels = j.value("channels", c.channels);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.encoder_depth = j.value("encoder_depth", c.encoder_depth);
  c.decoder_depth = j.value("decoder_depth", c.decoder_depth);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.trigger_proj_layers = j.value("trigger_proj_layers", c.trigger_proj_layers);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.fuse_residual = j.value("fuse_residual", c.fuse_residual);
  c.output_norm = j.value("output_norm", c.output_norm);
  c.zero_init_residual = j.value("zero_init_residual", c.zero_init_residual);
  return c;
}

TransformerBlockImpl::TransformerBlockImpl(int64_t dim, int64_t heads, int64_t mlp_ratio, bool zero_init)
    : heads_(heads) {
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj_ = register_module("proj", torch::nn::Linear(dim, dim));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1_ = register_module("fc1", torch::nn::Linear(dim, mlp_ratio * dim));
  fc2_ = register_module("fc2", torch::nn::Linear(mlp_ratio * dim, dim));
  if (zero_init) {
    torch::NoGradGuard no_grad;
    for (auto* l : {&proj_, &fc2_}) {
      (*l)->weight.zero_();
      (*l)->bias.zero_();
    }
  }
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x) {
  const int64_t b = x.size(0), t = x.size(1), d = x.size(2);
  const int64_t hd = d / heads_;
  auto qkv = qkv_(norm1_(x)).reshape({b, t, 3, heads_, hd}).permute({2, 0, 3, 1, 4});
  auto q = qkv[0], k = qkv[1], v = qkv[2];
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
  auto mixed = torch::matmul(attn, v).transpose(1, 2).reshape({b, t, d});
  auto h = x + proj_(mixed);
  return h + fc2_(torch::gelu(fc1_(norm2_(h))));
}

TriggerInjectorImpl::TriggerInjectorImpl(const InjectorConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  torch::manual_seed(seed);
  const int64_t d = config_.embed_dim;
  const int64_t patch_dim = config_.channels * config_.patch_size * config_.patch_size;
  patch_embed_ = register_module("patch_embed", torch::nn::Linear(patch_dim, d));
  pos_embed_ = register_parameter("pos_embed", torch::randn({1, config_.tokens(), d}) * 0.02);
  encoder_ = register_module("encoder", torch::nn::Sequential());
  for (int64_t i = 0; i < config_.encoder_depth; ++i)
    encoder_->push_back(TransformerBlock(d, config_.heads, config_.mlp_ratio, config_.zero_init_residual));
  trigger_embed_ = register_module("trigger_embed", torch::nn::Linear(config_.height * config_.width, d));
  fuse_mlp_ = register_module("fuse_mlp", torch::nn::Sequential());
  for (int64_t i = 0; i < config_.trigger_proj_layers; ++i) {
    fuse_mlp_->push_back(torch::nn::Linear(d, d));
    if (i + 1 < config_.trigger_proj_layers) fuse_mlp_->push_back(torch::nn::GELU());
  }
  decoder_ = register_module("decoder", torch::nn::Sequential());
  for (int64_t i = 0; i < config_.decoder_depth; ++i)
    decoder_->push_back(TransformerBlock(d, config_.heads, config_.mlp_ratio, config_.zero_init_residual));
  if (config_.output_norm)
    out_norm_ = register_module("out_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  out_proj_ = register_module("out_proj", torch::nn::Linear(d, patch_dim));

  // Watermark starts uniform in [0.4, 0.6].
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed ^ 0x3a7e5ULL);
  watermark_ = register_parameter("watermark", torch::rand({1, config_.height, config_.width}, gen) * 0.2 + 0.4);
}

torch::Tensor TriggerInjectorImpl::patchify(const torch::Tensor& x) const {
  const int64_t n = x.size(0), c = x.size(1), p = config_.patch_size;
  const int64_t gh = x.size(2) / p, gw = x.size(3) / p;
  return x.reshape({n, c, gh, p, gw, p}).permute({0, 2, 4, 1, 3, 5}).reshape({n, gh * gw, c * p * p});
}

torch::Tensor TriggerInjectorImpl::unpatchify(const torch::Tensor& tokens) const {
  const int64_t n = tokens.size(0), c = config_.channels, p = config_.patch_size;
  const int64_t gh = config_.height / p, gw = config_.width / p;
  return tokens.reshape({n, gh, gw, c, p, p}).permute({0, 3, 1, 4, 2, 5}).reshape({n, c, config_.height, config_.width});
}

torch::Tensor TriggerInjectorImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != config_.channels || x.size(2) != config_.height || x.size(3) != config_.width)
    throw ShapeError("injector expects (N," + std::to_string(config_.channels) + "," + std::to_string(config_.height) +
                     "," + std::to_string(config_.width) + "), got " + c10::str(x.sizes()));
  auto tokens = encoder_->forward(patch_embed_(patchify(x)) + pos_embed_);
  auto trig = trigger_embed_(watermark_.reshape({1, 1, -1}));
  auto mixed = tokens + trig;
  auto fused = fuse_mlp_->forward(mixed);
  if (config_.fuse_residual) fused = fused + mixed;
  auto decoded = decoder_->forward(fused);
  if (config_.output_norm) decoded = out_norm_(decoded);
  decoded = out_proj_(decoded);
  return torch::sigmoid(unpatchify(decoded));
}

void TriggerInjectorImpl::clamp_watermark() {
  torch::NoGradGuard no_grad;
  watermark_.clamp_(0.0, 1.0);
}

InjectorState InjectorState::create(const InjectorConfig& config, uint64_t seed) {
  InjectorState s;
  s.config = config;
  s.seed = seed;
  s.net = TriggerInjector(config, seed);
  return s;
}

Watermark InjectorState::watermark() const { return {net->watermark().detach().clone(), true}; }

void require_finite(const torch::Tensor& t, const std::string& what, int64_t step) {
  if (!torch::isfinite(t).all().item<bool>()) {
    std::string msg = "non-finite values in " + what;
    if (step >= 0) msg += " at step " + std::to_string(step);
    throw NumericError(msg);
  }
}

torch::Tensor inject(const InjectorState& state, const torch::Tensor& x) {
  torch::NoGradGuard no_grad;
  TriggerInjector net = state.net;  // shared handle; the module itself is mutable
  const bool was_training = net->is_training();
  net->eval();
  auto out = net->forward(x.to(torch::kFloat32));
  if (was_training) net->train();
  require_finite(out, "injector output", state.step);
  return out;
}

torch::Tensor injector_loss(const torch::Tensor& x, const torch::Tensor& x_prime, double epsilon) {
  if (x.sizes() != x_prime.sizes())
    throw ShapeError("injector_loss: shapes " + c10::str(x.sizes()) + " and " + c10::str(x_prime.sizes()) + " differ");
  if (!(epsilon >= 0.0)) throw ConfigError("injector_loss: epsilon must be >= 0");
  return torch::relu((x_prime - x).abs() - epsilon).pow(2).mean();
}

void save_injector(const InjectorState& state, const std::filesystem::path& path) {
  CheckpointWriter w("injector");
  w.meta() = {{"config", state.config.to_json()}, {"step", state.step}, {"seed", state.seed}};
  w.add_module("net.", *state.net);
  w.write(path);
}

InjectorState load_injector(const std::filesystem::path& path, const InjectorConfig* expected) {
  const auto r = CheckpointReader::open(path);
  if (r.kind() != "injector" && r.kind() != "joint") r.expect_kind("injector");
  const auto& meta = r.meta();
  const auto cfg = InjectorConfig::from_json(r.kind() == "joint" ? meta.at("injector_config") : meta.at("config"));
  if (expected != nullptr && !(cfg == *expected))
    throw ConfigError("injector checkpoint config mismatch: stored " + cfg.to_json().dump() + ", expected " +
                      expected->to_json().dump());
  auto state = InjectorState::create(cfg, meta.at("seed").get<uint64_t>());
  state.step = meta.at("step").get<int64_t>();
  r.load_module(r.kind() == "joint" ? "injector." : "net.", *state.net);
  return state;
}

}  // namespace latentmark
