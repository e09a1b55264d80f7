// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include "latentmark/anti_collapse.hpp"

#include <cmath>
#include <numbers>

#include "latentmark/errors.hpp"
#include "latentmark/hashing.hpp"
#include "latentmark/rng.hpp"

namespace F = torch::nn::functional;

namespace latentmark {

std::string to_string(OpKind k) {
  switch (k) {
    case OpKind::kRandomMask:
      return "RANDOM_MASK";
    case OpKind::kRescale:
      return "RESCALE";
    case OpKind::kNoise:
      return "NOISE";
    case OpKind::kRotate:
      return "ROTATE";
    case OpKind::kIdentity:
      return "IDENTITY";
  }
  return "IDENTITY";
}

OpKind parse_op_kind(const std::string& s) {
  if (s == "RANDOM_MASK") return OpKind::kRandomMask;
  if (s == "RESCALE") return OpKind::kRescale;
  if (s == "NOISE") return OpKind::kNoise;
  if (s == "ROTATE") return OpKind::kRotate;
  if (s == "IDENTITY") return OpKind::kIdentity;
  throw ConfigError("unknown anti-collapse op '" + s + "'");
}

void AntiCollapseOp::validate() const {
  const std::string name = to_string(kind);
  if (!(probability >= 0.0 && probability <= 1.0)) throw ConfigError(name + ": probability out of [0,1]");
  switch (kind) {
    case OpKind::kRandomMask:
      if (!(mask_fraction > 0.0 && mask_fraction < 1.0)) throw ConfigError(name + ": mask_fraction must be in (0,1)");
      break;
    case OpKind::kRescale:
      if (!(scale_min >= 0.5 && scale_max <= 2.0 && scale_min <= scale_max))
        throw ConfigError(name + ": scale range must lie within [0.5, 2.0]");
      break;
    case OpKind::kNoise:
      if (!(noise_sigma >= 0.0)) throw ConfigError(name + ": sigma must be >= 0");
      break;
    case OpKind::kRotate:
      if (!(max_angle_deg >= 0.0 && max_angle_deg <= 180.0)) throw ConfigError(name + ": angle range must be in [0,180]");
      break;
    case OpKind::kIdentity:
      break;
  }
}

nlohmann::json AntiCollapseOp::to_json() const {
  nlohmann::json j = {{"kind", to_string(kind)}, {"probability", probability}};
  switch (kind) {
    case OpKind::kRandomMask:
      j["mask_fraction"] = mask_fraction;
      break;
    case OpKind::kRescale:
      j["scale_min"] = scale_min;
      j["scale_max"] = scale_max;
      break;
    case OpKind::kNoise:
      j["noise_sigma"] = noise_sigma;
      break;
    case OpKind::kRotate:
      j["max_angle_deg"] = max_angle_deg;
      break;
    case OpKind::kIdentity:
      break;
  }
  return j;
}

AntiCollapseOp AntiCollapseOp::from_json(const nlohmann::json& j) {
  AntiCollapseOp op;
  op.kind = parse_op_kind(j.at("kind").get<std::string>());
  op.probability = j.value("probability", op.probability);
  op.mask_fraction = j.value("mask_fraction", op.mask_fraction);
  op.scale_min = j.value("scale_min", op.scale_min);
  op.scale_max = j.value("scale_max", op.scale_max);
  op.noise_sigma = j.value("noise_sigma", op.noise_sigma);
  op.max_angle_deg = j.value("max_angle_deg", op.max_angle_deg);
  return op;
}

AntiCollapseSet AntiCollapseSet::standard(uint64_t seed) {
  AntiCollapseSet s;
  s.seed = seed;
  for (OpKind k : {OpKind::kRandomMask, OpKind::kRotate, OpKind::kNoise, OpKind::kRescale}) {
    AntiCollapseOp op;
    op.kind = k;
    s.ops.push_back(op);
  }
  return s;
}

void AntiCollapseSet::validate() const {
  if (ops.empty()) throw ConfigError("anti-collapse set must contain at least one op");
  for (const auto& op : ops) op.validate();
}

nlohmann::json AntiCollapseSet::to_json() const {
  nlohmann::json ops_json = nlohmann::json::array();
  for (const auto& op : ops) ops_json.push_back(op.to_json());
  return {{"seed", seed}, {"ops", ops_json}};
}

AntiCollapseSet AntiCollapseSet::from_json(const nlohmann::json& j) {
  AntiCollapseSet s;
  s.seed = j.value("seed", uint64_t{0});
  for (const auto& op : j.at("ops")) s.ops.push_back(AntiCollapseOp::from_json(op));
  return s;
}

torch::Tensor random_mask(const torch::Tensor& x, double fraction, std::mt19937_64& rng) {
  const int64_t n = x.size(0), h = x.size(2), w = x.size(3);
  const auto count = static_cast<int64_t>(std::llround(fraction * static_cast<double>(h * w)));
  auto keep = torch::ones({n, 1, h, w}, x.options().requires_grad(false));
  if (count <= 0) return x * keep;
  int64_t rw = std::clamp<int64_t>(std::llround(std::sqrt(static_cast<double>(count))), 1, w);
  int64_t rh = (count + rw - 1) / rw;
  if (rh > h) {
    rw = (count + h - 1) / h;
    rh = (count + rw - 1) / rw;
  }
  auto acc = keep.accessor<float, 4>();
  for (int64_t i = 0; i < n; ++i) {
    const auto y0 = static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(h - rh + 1)));
    const auto x0 = static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(w - rw + 1)));
    int64_t left = count;
    for (int64_t y = 0; y < rh && left > 0; ++y)
      for (int64_t c = 0; c < rw && left > 0; ++c, --left) acc[i][0][y0 + y][x0 + c] = 0.0f;
  }
  return x * keep;
}

torch::Tensor rescale(const torch::Tensor& x, double scale) {
  const int64_t h = x.size(2), w = x.size(3);
  const int64_t sh = std::max<int64_t>(1, std::llround(scale * static_cast<double>(h)));
  const int64_t sw = std::max<int64_t>(1, std::llround(scale * static_cast<double>(w)));
  auto opts = [](int64_t a, int64_t b) {
    return F::InterpolateFuncOptions().size(std::vector<int64_t>{a, b}).mode(torch::kBilinear).align_corners(false);
  };
  auto mid = F::interpolate(x, opts(sh, sw));
  return F::interpolate(mid, opts(h, w));
}

torch::Tensor add_noise(const torch::Tensor& x, double sigma, uint64_t seed) {
  if (sigma == 0.0) return x;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return x + sigma * torch::randn(x.sizes(), gen, x.options().requires_grad(false));
}

torch::Tensor rotate(const torch::Tensor& x, const std::vector<double>& angles_deg) {
  const int64_t n = x.size(0), h = x.size(2), w = x.size(3);
  if (static_cast<int64_t>(angles_deg.size()) != n) throw ShapeError("rotate: one angle per image required");
  auto theta = torch::zeros({n, 2, 3}, x.options().requires_grad(false));
  auto acc = theta.accessor<float, 3>();
  const double aspect = static_cast<double>(h) / static_cast<double>(w);
  for (int64_t i = 0; i < n; ++i) {
    const double a = angles_deg[static_cast<std::size_t>(i)] * std::numbers::pi / 180.0;
    acc[i][0][0] = static_cast<float>(std::cos(a));
    acc[i][0][1] = static_cast<float>(-std::sin(a) * aspect);
    acc[i][1][0] = static_cast<float>(std::sin(a) / aspect);
    acc[i][1][1] = static_cast<float>(std::cos(a));
  }
  auto grid = F::affine_grid(theta, {n, x.size(1), h, w}, /*align_corners=*/false);
  return F::grid_sample(x, grid,
                        F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kZeros).align_corners(false));
}

bool op_fires(const AntiCollapseSet& set, std::size_t k, int64_t step) {
  std::mt19937_64 gate(derive_seed({set.seed, static_cast<uint64_t>(step), k, 0}));
  return uniform01(gate) < set.ops.at(k).probability;
}

namespace {

torch::Tensor apply_op(const AntiCollapseOp& op, const torch::Tensor& x, std::mt19937_64& rng) {
  switch (op.kind) {
    case OpKind::kRandomMask:
      return random_mask(x, op.mask_fraction, rng);
    case OpKind::kRescale:
      return rescale(x, uniform_real(rng, op.scale_min, op.scale_max));
    case OpKind::kNoise:
      return add_noise(x, op.noise_sigma, rng());
    case OpKind::kRotate: {
      std::vector<double> angles(static_cast<std::size_t>(x.size(0)));
      for (auto& a : angles) a = uniform_real(rng, -op.max_angle_deg, op.max_angle_deg);
      return rotate(x, angles);
    }
    case OpKind::kIdentity:
      return x;
  }
  return x;
}

}  // namespace

torch::Tensor apply_set(const AntiCollapseSet& set, const torch::Tensor& x, int64_t step) {
  if (x.dim() != 4) throw ShapeError("apply_set expects an (N,C,H,W) batch");
  torch::Tensor out = x;
  bool any = false;
  for (std::size_t k = 0; k < set.ops.size(); ++k) {
    if (!op_fires(set, k, step)) continue;
    std::mt19937_64 rng(derive_seed({set.seed, static_cast<uint64_t>(step), k, 1}));
    out = apply_op(set.ops[k], out, rng);
    any = true;
  }
  return any ? out.clamp(0.0, 1.0) : out;
}

std::string to_string(EvalCondition c) {
  switch (c) {
    case EvalCondition::kNone:
      return "None";
    case EvalCondition::kRM:
      return "RM";
    case EvalCondition::kRo:
      return "Ro";
    case EvalCondition::kNoise:
      return "Noise";
    case EvalCondition::kRS:
      return "RS";
  }
  return "None";
}

EvalCondition parse_condition(const std::string& s) {
  std::string u;
  for (char ch : s) u += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  if (u == "NONE") return EvalCondition::kNone;
  if (u == "RM") return EvalCondition::kRM;
  if (u == "RO") return EvalCondition::kRo;
  if (u == "NOISE") return EvalCondition::kNoise;
  if (u == "RS") return EvalCondition::kRS;
  throw ConfigError("unknown corruption kind '" + s + "' (expected None|RM|Ro|Noise|RS)");
}

const std::vector<EvalCondition>& all_conditions() {
  static const std::vector<EvalCondition> all = {EvalCondition::kNone, EvalCondition::kRM, EvalCondition::kRo,
                                                 EvalCondition::kNoise, EvalCondition::kRS};
  return all;
}

torch::Tensor corruption_for_eval(EvalCondition condition, const torch::Tensor& x, const EvalCorruptionParams& params) {
  if (x.dim() != 4) throw ShapeError("corruption_for_eval expects an (N,C,H,W) batch");
  if (condition == EvalCondition::kNone) return x;
  torch::NoGradGuard no_grad;
  const torch::Tensor xc = x.to(torch::kFloat32).contiguous();
  std::vector<torch::Tensor> out;
  out.reserve(static_cast<std::size_t>(xc.size(0)));
  for (int64_t i = 0; i < xc.size(0); ++i) {
    const torch::Tensor img = xc.slice(0, i, i + 1);
    const auto bytes = std::as_bytes(std::span<const float>(img.data_ptr<float>(), static_cast<std::size_t>(img.numel())));
    std::mt19937_64 rng(derive_seed({params.seed, static_cast<uint64_t>(condition), fnv1a64(bytes)}));
    torch::Tensor r;
    switch (condition) {
      case EvalCondition::kRM:
        r = random_mask(img, params.mask_fraction, rng);
        break;
      case EvalCondition::kRo:
        r = rotate(img, {uniform_real(rng, -params.max_angle_deg, params.max_angle_deg)});
        break;
      case EvalCondition::kNoise:
        r = add_noise(img, params.noise_sigma, rng());
        break;
      case EvalCondition::kRS:
        r = rescale(img, uniform_real(rng, params.scale_min, params.scale_max));
        break;
      case EvalCondition::kNone:
        r = img;
        break;
    }
    out.push_back(r.clamp(0.0, 1.0));
  }
  return torch::cat(out, 0);
}

}  // namespace latentmark
