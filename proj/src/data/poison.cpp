// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <fstream>

#include "latentmark/checkpoint.hpp"
#include "latentmark/data.hpp"
#include "latentmark/errors.hpp"
#include "latentmark/kernels/image_kernels.hpp"
#include "latentmark/rng.hpp"

namespace latentmark {
namespace {

std::span<const float> cspan(const torch::Tensor& t) {
  return {t.data_ptr<float>(), static_cast<std::size_t>(t.numel())};
}

std::span<float> mspan(torch::Tensor& t) { return {t.data_ptr<float>(), static_cast<std::size_t>(t.numel())}; }

// Returns a contiguous single-plane float map of size h*w from (1,H,W) or (H,W).
torch::Tensor as_plane(const torch::Tensor& m, int64_t h, int64_t w, const char* what) {
  if (!m.defined()) throw ShapeError(std::string(what) + " is undefined");
  torch::Tensor p = m;
  if (p.dim() == 3 && p.size(0) == 1) p = p.squeeze(0);
  if (p.dim() != 2 || p.size(0) != h || p.size(1) != w)
    throw ShapeError(std::string(what) + " shape " + c10::str(m.sizes()) + " does not broadcast to " +
                     std::to_string(h) + "x" + std::to_string(w));
  return p.to(torch::kFloat32).contiguous();
}

// Normalizes an image or batch to (N,C,H,W) float contiguous.
torch::Tensor as_batch(const torch::Tensor& x) {
  if (x.dim() == 3) return x.unsqueeze(0).to(torch::kFloat32).contiguous();
  if (x.dim() == 4) return x.to(torch::kFloat32).contiguous();
  throw ShapeError("expected image (C,H,W) or batch (N,C,H,W), got " + c10::str(x.sizes()));
}

}  // namespace

torch::Tensor blend_inject(const torch::Tensor& x, const torch::Tensor& m, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("blend factor must lie in [0,1]");
  const torch::Tensor xb = as_batch(x);
  const int64_t n = xb.size(0), c = xb.size(1), h = xb.size(2), w = xb.size(3);
  const torch::Tensor plane = as_plane(m, h, w, "watermark");
  torch::Tensor out = torch::empty_like(xb);
  const auto& k = kernels::active_kernels();
  const std::size_t per_image = static_cast<std::size_t>(c * h * w);
  for (int64_t i = 0; i < n; ++i) {
    k.blend(cspan(xb).subspan(i * per_image, per_image), cspan(plane), static_cast<float>(lambda),
            static_cast<std::size_t>(c), mspan(out).subspan(i * per_image, per_image));
  }
  return x.dim() == 3 ? out.squeeze(0) : out;
}

torch::Tensor blend_inject_alpha(const torch::Tensor& x, const torch::Tensor& pattern, const torch::Tensor& alpha) {
  const torch::Tensor xb = as_batch(x);
  const int64_t n = xb.size(0), c = xb.size(1), h = xb.size(2), w = xb.size(3);
  const torch::Tensor pat = as_plane(pattern, h, w, "pattern");
  const torch::Tensor al = as_plane(alpha, h, w, "alpha");
  torch::Tensor out = torch::empty_like(xb);
  const auto& k = kernels::active_kernels();
  const std::size_t per_image = static_cast<std::size_t>(c * h * w);
  for (int64_t i = 0; i < n; ++i) {
    k.blend_alpha(cspan(xb).subspan(i * per_image, per_image), cspan(pat), cspan(al), static_cast<std::size_t>(c),
                  mspan(out).subspan(i * per_image, per_image));
  }
  return x.dim() == 3 ? out.squeeze(0) : out;
}

std::string to_string(InjectionMode m) {
  return m == InjectionMode::kLearnedInjector ? "LEARNED_INJECTOR" : "LINEAR_BLEND";
}

InjectionMode parse_injection_mode(const std::string& s) {
  if (s == "LEARNED_INJECTOR" || s == "learned") return InjectionMode::kLearnedInjector;
  if (s == "LINEAR_BLEND" || s == "blend") return InjectionMode::kLinearBlend;
  throw ConfigError("unknown injection mode '" + s + "'");
}

void PoisonSpec::validate(int64_t num_classes) const {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("ratio out of [0,1]");
  if (!(blend_factor >= 0.0 && blend_factor <= 1.0)) throw ConfigError("blend_factor out of [0,1]");
  if (target_label < 0 || (num_classes > 0 && target_label >= num_classes))
    throw ConfigError("target_label " + std::to_string(target_label) + " invalid for dataset");
}

nlohmann::json PoisonSpec::to_json() const {
  return {{"ratio", ratio}, {"target_label", target_label}, {"blend_factor", blend_factor}, {"mode", to_string(mode)}};
}

PoisonSpec PoisonSpec::from_json(const nlohmann::json& j) {
  PoisonSpec p;
  p.ratio = j.value("ratio", p.ratio);
  p.target_label = j.value("target_label", p.target_label);
  p.blend_factor = j.value("blend_factor", p.blend_factor);
  p.mode = parse_injection_mode(j.value("mode", to_string(p.mode)));
  return p;
}

BlendTrigger make_patch_trigger(int64_t height, int64_t width, int64_t patch, int64_t margin) {
  if (patch <= 0 || patch + margin > std::min(height, width)) throw ConfigError("patch does not fit the image");
  BlendTrigger t;
  t.pattern = torch::zeros({1, height, width});
  t.alpha = torch::zeros({1, height, width});
  const int64_t y0 = height - margin - patch, x0 = width - margin - patch;
  for (int64_t y = 0; y < patch; ++y) {
    for (int64_t x = 0; x < patch; ++x) {
      t.pattern[0][y0 + y][x0 + x] = ((x + y) % 2 == 0) ? 1.0f : 0.0f;
      t.alpha[0][y0 + y][x0 + x] = 1.0f;
    }
  }
  return t;
}

int64_t PoisonedDataset::poisoned_count() const {
  return std::count(poison_mask.begin(), poison_mask.end(), uint8_t{1});
}

std::vector<int64_t> PoisonedDataset::poisoned_indices() const {
  std::vector<int64_t> idx;
  for (std::size_t i = 0; i < poison_mask.size(); ++i)
    if (poison_mask[i]) idx.push_back(static_cast<int64_t>(i));
  return idx;
}

std::vector<int64_t> select_poison_indices(int64_t n, double ratio, uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("ratio out of [0,1]");
  const auto k = static_cast<int64_t>(std::llround(ratio * static_cast<double>(n)));
  std::vector<int64_t> idx(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  // Partial Fisher-Yates: the first k slots become a uniform k-subset.
  std::mt19937_64 rng(derive_seed({seed, 0x9015011ULL}));
  for (int64_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

PoisonedDataset build_poisoned_dataset(const Dataset& clean, const PoisonSpec& spec, const InjectFn* injector,
                                       const BlendTrigger* trigger, uint64_t seed) {
  spec.validate(clean.num_classes);
  if (spec.mode == InjectionMode::kLearnedInjector && (injector == nullptr || !*injector))
    throw ConfigError("LEARNED_INJECTOR poisoning requires a trained injector");
  if (spec.mode == InjectionMode::kLinearBlend && (trigger == nullptr || !trigger->pattern.defined()))
    throw ConfigError("LINEAR_BLEND poisoning requires a trigger pattern");

  PoisonedDataset out;
  out.spec = spec;
  out.seed = seed;
  out.data.name = clean.name;
  out.data.num_classes = clean.num_classes;
  out.data.images = clean.images.clone();
  out.data.labels = clean.labels.clone();
  const int64_t n = clean.size();
  out.poison_mask.assign(static_cast<std::size_t>(n), 0);
  out.original_labels.resize(static_cast<std::size_t>(n));
  const auto* lab = clean.labels.data_ptr<int64_t>();
  std::copy(lab, lab + n, out.original_labels.begin());

  const auto chosen = select_poison_indices(n, spec.ratio, seed);
  constexpr int64_t kChunk = 64;
  torch::NoGradGuard no_grad;
  for (std::size_t begin = 0; begin < chosen.size(); begin += kChunk) {
    const std::size_t end = std::min(chosen.size(), begin + kChunk);
    auto sel = torch::tensor(std::vector<int64_t>(chosen.begin() + begin, chosen.begin() + end), torch::kInt64);
    const torch::Tensor x = clean.images.index_select(0, sel);
    torch::Tensor bx;
    if (spec.mode == InjectionMode::kLearnedInjector) {
      bx = (*injector)(x);
    } else if (trigger->alpha.defined()) {
      bx = blend_inject_alpha(x, trigger->pattern, trigger->alpha);
    } else {
      bx = blend_inject(x, trigger->pattern, spec.blend_factor);
    }
    if (bx.sizes() != x.sizes()) throw ShapeError("trigger injection changed the image shape");
    out.data.images.index_copy_(0, sel, bx.to(torch::kFloat32));
  }
  for (int64_t i : chosen) {
    out.poison_mask[static_cast<std::size_t>(i)] = 1;
    out.data.labels[i] = spec.target_label;
  }
  return out;
}

nlohmann::json poison_manifest(const PoisonedDataset& p) {
  return {{"seed", p.seed},
          {"ratio", p.spec.ratio},
          {"target_label", p.spec.target_label},
          {"blend_factor", p.spec.blend_factor},
          {"mode", to_string(p.spec.mode)},
          {"dataset", p.data.name},
          {"num_examples", p.data.size()},
          {"poisoned_indices", p.poisoned_indices()}};
}

void write_poison_manifest(const PoisonedDataset& p, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << poison_manifest(p).dump(2) << '\n';
}

void save_poisoned_dataset(const PoisonedDataset& p, const std::filesystem::path& path) {
  CheckpointWriter w("poisoned_dataset");
  w.meta() = poison_manifest(p);
  w.meta()["num_classes"] = p.data.num_classes;
  w.add_tensor("images", p.data.images);
  w.add_tensor("labels", p.data.labels);
  w.add_tensor("poison_mask", torch::tensor(std::vector<int64_t>(p.poison_mask.begin(), p.poison_mask.end()),
                                            torch::kInt64)
                                  .to(torch::kUInt8));
  w.add_tensor("original_labels", torch::tensor(p.original_labels, torch::kInt64));
  w.write(path);
}

PoisonedDataset load_poisoned_dataset(const std::filesystem::path& path) {
  const auto r = CheckpointReader::open(path);
  r.expect_kind("poisoned_dataset");
  PoisonedDataset p;
  const auto& m = r.meta();
  p.seed = m.at("seed").get<uint64_t>();
  p.spec.ratio = m.at("ratio").get<double>();
  p.spec.target_label = m.at("target_label").get<int64_t>();
  p.spec.blend_factor = m.at("blend_factor").get<double>();
  p.spec.mode = parse_injection_mode(m.at("mode").get<std::string>());
  p.data.name = m.at("dataset").get<std::string>();
  p.data.num_classes = m.at("num_classes").get<int64_t>();
  p.data.images = r.tensor("images");
  p.data.labels = r.tensor("labels");
  const auto mask = r.tensor("poison_mask");
  p.poison_mask.assign(mask.data_ptr<uint8_t>(), mask.data_ptr<uint8_t>() + mask.numel());
  const auto orig = r.tensor("original_labels");
  p.original_labels.assign(orig.data_ptr<int64_t>(), orig.data_ptr<int64_t>() + orig.numel());
  return p;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  CheckpointWriter w("dataset");
  w.meta() = {{"name", d.name}, {"num_classes", d.num_classes}};
  w.add_tensor("images", d.images);
  w.add_tensor("labels", d.labels);
  w.write(path);
}

Dataset load_dataset_file(const std::filesystem::path& path) {
  const auto r = CheckpointReader::open(path);
  r.expect_kind("dataset");
  Dataset d;
  d.name = r.meta().at("name").get<std::string>();
  d.num_classes = r.meta().at("num_classes").get<int64_t>();
  d.images = r.tensor("images");
  d.labels = r.tensor("labels");
  return d;
}

}  // namespace latentmark
