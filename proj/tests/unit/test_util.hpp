// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

// Helpers shared by the unit tests.

#pragma once

#include <torch/torch.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>

namespace testutil {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("latentmark_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Largest relative disagreement between autograd and central differences of
// `f` at `x` (double precision); relative to max(|g|, 1e-3) per element.
inline double max_fd_relative_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, torch::Tensor x,
                                    double h = 1e-6) {
  x = x.to(torch::kFloat64).detach().clone().set_requires_grad(true);
  auto y = f(x);
  y.backward();
  const auto g = x.grad().clone();
  auto flat = x.detach().clone().view(-1);
  double worst = 0.0;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    auto xp = flat.clone(), xm = flat.clone();
    xp[i] += h;
    xm[i] -= h;
    const double fp = f(xp.view(x.sizes())).item<double>();
    const double fm = f(xm.view(x.sizes())).item<double>();
    const double fd = (fp - fm) / (2.0 * h);
    const double an = g.view(-1)[i].item<double>();
    worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(an), 1e-3));
  }
  return worst;
}

}  // namespace testutil
