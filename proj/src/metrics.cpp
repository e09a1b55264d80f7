// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include "latentmark/metrics.hpp"

#include <torch/script.h>

#include <cmath>

#include "latentmark/errors.hpp"
#include "latentmark/kernels/image_kernels.hpp"

namespace F = torch::nn::functional;

namespace latentmark {
namespace {

void check_pair(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes())
    throw ShapeError(std::string(what) + ": shapes " + c10::str(a.sizes()) + " and " + c10::str(b.sizes()) + " differ");
  if (a.dim() != 4) throw ShapeError(std::string(what) + ": expected (N,C,H,W) tensors");
}

std::span<const float> view(const torch::Tensor& t) {
  return {t.data_ptr<float>(), static_cast<std::size_t>(t.numel())};
}

std::vector<float> gaussian_taps(std::size_t k, double sigma) {
  std::vector<double> w(k);
  const double c = (static_cast<double>(k) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double d = static_cast<double>(i) - c;
    w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += w[i];
  }
  std::vector<float> taps(k);
  for (std::size_t i = 0; i < k; ++i) taps[i] = static_cast<float>(w[i] / total);
  return taps;
}

}  // namespace

double psnr_from_mse(double mse) {
  if (mse < 1e-10) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / mse));
}

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b, "psnr");
  const auto ac = a.to(torch::kFloat32).contiguous(), bc = b.to(torch::kFloat32).contiguous();
  const auto& k = kernels::active_kernels();
  const int64_t n = a.size(0);
  const auto per = static_cast<std::size_t>(a[0].numel());
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const auto sa = view(ac).subspan(static_cast<std::size_t>(i) * per, per);
    const auto sb = view(bc).subspan(static_cast<std::size_t>(i) * per, per);
    total += psnr_from_mse(k.sq_diff_sum(sa, sb) / static_cast<double>(per));
  }
  return total / static_cast<double>(n);
}

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b, "ssim");
  const auto ac = a.to(torch::kFloat32).contiguous(), bc = b.to(torch::kFloat32).contiguous();
  const auto& kt = kernels::active_kernels();
  const auto rows = static_cast<std::size_t>(a.size(2)), cols = static_cast<std::size_t>(a.size(3));
  const std::size_t win = std::min<std::size_t>({11, rows, cols});
  const auto taps = gaussian_taps(win, 1.5);
  const std::size_t plane = rows * cols, orow = rows - win + 1, ocol = cols - win + 1;
  constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;

  std::vector<float> xx(plane), yy(plane), xy(plane), tmp(rows * ocol);
  std::vector<float> mx(orow * ocol), my(orow * ocol), sxx(orow * ocol), syy(orow * ocol), sxy(orow * ocol);
  auto blur = [&](std::span<const float> in, std::vector<float>& out) {
    kt.filter_rows_valid(in, rows, cols, taps, tmp);
    kt.filter_cols_valid(tmp, rows, ocol, taps, out);
  };

  const int64_t planes = a.size(0) * a.size(1);
  double total = 0.0;
  for (int64_t p = 0; p < planes; ++p) {
    const auto x = view(ac).subspan(static_cast<std::size_t>(p) * plane, plane);
    const auto y = view(bc).subspan(static_cast<std::size_t>(p) * plane, plane);
    kt.mul(x, x, xx);
    kt.mul(y, y, yy);
    kt.mul(x, y, xy);
    blur(x, mx);
    blur(y, my);
    blur(xx, sxx);
    blur(yy, syy);
    blur(xy, sxy);
    double acc = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double ux = mx[i], uy = my[i];
      const double vx = sxx[i] - ux * ux, vy = syy[i] - uy * uy, cxy = sxy[i] - ux * uy;
      acc += ((2.0 * ux * uy + kC1) * (2.0 * cxy + kC2)) / ((ux * ux + uy * uy + kC1) * (vx + vy + kC2));
    }
    total += acc / static_cast<double>(mx.size());
  }
  return total / static_cast<double>(planes);
}

RandomFeatureDistance::RandomFeatureDistance(int64_t channels, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const std::vector<int64_t> widths = {channels, 16, 32, 64};
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const double scale = std::sqrt(2.0 / static_cast<double>(widths[l] * 9));
    weights_.push_back(torch::randn({widths[l + 1], widths[l], 3, 3}, gen) * scale);
  }
}

double RandomFeatureDistance::distance(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b, "lpips");
  torch::NoGradGuard no_grad;
  auto fa = a.to(torch::kFloat32) * 2.0 - 1.0;
  auto fb = b.to(torch::kFloat32) * 2.0 - 1.0;
  torch::Tensor d = torch::zeros({a.size(0)}, torch::kFloat64);
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const int64_t stride = l == 0 ? 1 : 2;
    fa = torch::relu(F::conv2d(fa, weights_[l], F::Conv2dFuncOptions().stride(stride).padding(1)));
    fb = torch::relu(F::conv2d(fb, weights_[l], F::Conv2dFuncOptions().stride(stride).padding(1)));
    const auto na = fa / (fa.pow(2).sum(1, true).sqrt() + 1e-10);
    const auto nb = fb / (fb.pow(2).sum(1, true).sqrt() + 1e-10);
    d += (na - nb).pow(2).sum(1).mean({1, 2}).to(torch::kFloat64);
  }
  return d.mean().item<double>();
}

struct TorchScriptDistance::Impl {
  torch::jit::Module module;
};

TorchScriptDistance::TorchScriptDistance(const std::filesystem::path& module_path)
    : path_(module_path), impl_(std::make_unique<Impl>()) {
  try {
    impl_->module = torch::jit::load(module_path.string());
  } catch (const c10::Error& e) {
    throw IoError("cannot load perceptual module " + module_path.string() + ": " + e.what_without_backtrace());
  }
  impl_->module.eval();
}

TorchScriptDistance::~TorchScriptDistance() = default;

double TorchScriptDistance::distance(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b, "lpips");
  torch::NoGradGuard no_grad;
  const auto out = impl_->module.forward({a.to(torch::kFloat32) * 2.0 - 1.0, b.to(torch::kFloat32) * 2.0 - 1.0})
                       .toTensor();
  if (out.numel() != a.size(0))
    throw ContractError("perceptual module returned " + std::to_string(out.numel()) + " values for " +
                        std::to_string(a.size(0)) + " images");
  return out.to(torch::kFloat64).mean().item<double>();
}

std::unique_ptr<PerceptualDistance> make_perceptual_distance(const std::optional<std::filesystem::path>& module_path,
                                                             int64_t channels) {
  if (module_path && !module_path->empty()) return std::make_unique<TorchScriptDistance>(*module_path);
  return std::make_unique<RandomFeatureDistance>(channels);
}

nlohmann::json StealthMetrics::to_json() const {
  return {{"psnr", psnr},
          {"ssim", ssim},
          {"lpips", lpips},
          {"lpips_backend", lpips_backend},
          {"lpips_comparable", lpips_comparable}};
}

StealthMetrics StealthMetrics::from_json(const nlohmann::json& j) {
  StealthMetrics s;
  s.psnr = j.at("psnr").get<double>();
  s.ssim = j.at("ssim").get<double>();
  s.lpips = j.at("lpips").get<double>();
  s.lpips_backend = j.value("lpips_backend", std::string());
  s.lpips_comparable = j.value("lpips_comparable", false);
  return s;
}

StealthMetrics measure_stealth(const torch::Tensor& clean, const torch::Tensor& poisoned, PerceptualDistance& lpips) {
  StealthMetrics s;
  s.psnr = psnr(clean, poisoned);
  s.ssim = ssim(clean, poisoned);
  s.lpips = lpips.distance(clean, poisoned);
  s.lpips_backend = lpips.name();
  s.lpips_comparable = lpips.comparable();
  return s;
}

}  // namespace latentmark
