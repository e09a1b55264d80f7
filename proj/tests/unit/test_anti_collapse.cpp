// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include <torch/torch.h>

#include <cmath>
#include <random>

#include "doctest.h"
#include "latentmark/anti_collapse.hpp"
#include "latentmark/errors.hpp"

using namespace latentmark;

TEST_CASE("random mask zeroes exactly round(fraction * H * W) pixels per image") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 100; ++t) {
    const int64_t h = 4 + static_cast<int64_t>(rng() % 29), w = 4 + static_cast<int64_t>(rng() % 29);
    const double frac = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    auto x = torch::rand({2, 3, h, w}) * 0.9 + 0.05;  // strictly positive so zeros mark masked pixels
    auto y = random_mask(x, frac, rng);
    const auto expected = std::llround(frac * static_cast<double>(h * w));
    for (int64_t i = 0; i < 2; ++i) {
      auto zero = y[i].eq(0).all(0);  // pixel zeroed in every channel
      CHECK(zero.sum().item<int64_t>() == expected);
      // untouched pixels are bit-identical
      CHECK(torch::equal(y[i].masked_select(~zero.unsqueeze(0).expand({3, h, w})),
                         x[i].masked_select(~zero.unsqueeze(0).expand({3, h, w}))));
    }
  }
  std::mt19937_64 r2(5);
  CHECK(random_mask(torch::ones({1, 1, 32, 32}), 0.25, r2).eq(0).sum().item<int64_t>() == 256);
}

TEST_CASE("corruptions preserve shape and range") {
  torch::manual_seed(0);
  auto x = torch::rand({3, 3, 32, 32});
  std::mt19937_64 rng(2);
  for (const auto& y : {random_mask(x, 0.3, rng), rescale(x, 0.5), rescale(x, 2.0), add_noise(x, 0.1, 3),
                        rotate(x, {10.0, -15.0, 0.0})}) {
    CHECK(y.sizes() == x.sizes());
  }
  const auto set = AntiCollapseSet::standard(4);
  for (int64_t step = 0; step < 20; ++step) {
    auto y = apply_set(set, x, step);
    CHECK(y.sizes() == x.sizes());
    CHECK(y.min().item<float>() >= 0.0f);
    CHECK(y.max().item<float>() <= 1.0f);
  }
  for (auto c : all_conditions()) {
    auto y = corruption_for_eval(c, x);
    CHECK(y.sizes() == x.sizes());
    CHECK(y.min().item<float>() >= 0.0f);
    CHECK(y.max().item<float>() <= 1.0f);
  }
}

TEST_CASE("rescale to 0.5 on 32x32 passes through 16x16") {
  // A 2x2-block-constant image survives the down/up trip unchanged in the interior.
  auto small = torch::rand({1, 1, 16, 16});
  auto x = torch::nn::functional::interpolate(
      small, torch::nn::functional::InterpolateFuncOptions().size(std::vector<int64_t>{32, 32}).mode(torch::kNearest));
  auto y = rescale(x, 0.5);
  CHECK(y.sizes() == x.sizes());
  auto manual = torch::nn::functional::interpolate(
      torch::nn::functional::interpolate(x, torch::nn::functional::InterpolateFuncOptions()
                                                .size(std::vector<int64_t>{16, 16})
                                                .mode(torch::kBilinear)
                                                .align_corners(false)),
      torch::nn::functional::InterpolateFuncOptions()
          .size(std::vector<int64_t>{32, 32})
          .mode(torch::kBilinear)
          .align_corners(false));
  CHECK(torch::allclose(y, manual, 0.0, 1e-6));
}

TEST_CASE("rotation: zero angle is identity; +theta then -theta restores the centre") {
  torch::manual_seed(1);
  auto x = torch::rand({2, 3, 32, 32});
  CHECK(torch::allclose(rotate(x, {0.0, 0.0}), x, 0.0, 1e-5));
  // Smooth image so bilinear resampling error stays small.
  auto smooth = torch::nn::functional::avg_pool2d(torch::rand({1, 3, 36, 36}),
                                                  torch::nn::functional::AvgPool2dFuncOptions(5).stride(1));
  auto back = rotate(rotate(smooth, {12.0}), {-12.0});
  auto centre = [](const torch::Tensor& t) { return t.slice(2, 8, 24).slice(3, 8, 24); };
  CHECK((centre(back) - centre(smooth)).abs().mean().item<float>() < 2e-2f);
  CHECK_THROWS_AS(rotate(x, {1.0}), ShapeError);
}

TEST_CASE("noise: seeded, zero sigma is identity") {
  auto x = torch::rand({2, 3, 8, 8});
  CHECK(torch::equal(add_noise(x, 0.05, 7), add_noise(x, 0.05, 7)));
  CHECK_FALSE(torch::equal(add_noise(x, 0.05, 7), add_noise(x, 0.05, 8)));
  CHECK(torch::equal(add_noise(x, 0.0, 7), x));
}

TEST_CASE("apply_set is deterministic in (seed, step)") {
  auto x = torch::rand({2, 3, 16, 16});
  const auto a = AntiCollapseSet::standard(11);
  bool any_differs = false;
  for (int64_t step = 0; step < 10; ++step) {
    CHECK(torch::equal(apply_set(a, x, step), apply_set(a, x, step)));
    if (!torch::equal(apply_set(a, x, step), apply_set(a, x, step + 1))) any_differs = true;
  }
  CHECK(any_differs);
}

TEST_CASE("Bernoulli gating: acceptance rate within 3 sigma over 1000 steps") {
  auto set = AntiCollapseSet::standard(123);
  set.ops[1].probability = 0.2;
  set.ops[2].probability = 0.9;
  for (std::size_t k = 0; k < set.ops.size(); ++k) {
    const double p = set.ops[k].probability;
    int fired = 0;
    for (int64_t step = 0; step < 1000; ++step) fired += op_fires(set, k, step) ? 1 : 0;
    const double sigma = std::sqrt(1000.0 * p * (1 - p));
    CHECK(std::abs(fired - 1000.0 * p) <= 3 * sigma);
  }
  // independent across ops: firing patterns of op 0 and op 3 are not identical
  int agree = 0;
  for (int64_t step = 0; step < 1000; ++step) agree += op_fires(set, 0, step) == op_fires(set, 3, step);
  CHECK(agree < 1000);
}

TEST_CASE("p = 0 for every op is an exact identity; p = 1 always fires") {
  auto set = AntiCollapseSet::standard(3);
  for (auto& op : set.ops) op.probability = 0.0;
  auto x = torch::rand({2, 3, 16, 16});
  for (int64_t s = 0; s < 5; ++s) CHECK(torch::equal(apply_set(set, x, s), x));
  for (auto& op : set.ops) op.probability = 1.0;
  for (int64_t s = 0; s < 5; ++s)
    for (std::size_t k = 0; k < set.ops.size(); ++k) CHECK(op_fires(set, k, s));
}

TEST_CASE("apply_set keeps gradients flowing to the input") {
  auto set = AntiCollapseSet::standard(9);
  auto x = torch::rand({1, 3, 16, 16}).set_requires_grad(true);
  apply_set(set, x * 0.8 + 0.1, 3).sum().backward();
  CHECK(x.grad().defined());
  CHECK(x.grad().abs().sum().item<float>() > 0.0f);
}

TEST_CASE("eval corruption is per-image and order independent") {
  torch::manual_seed(3);
  auto x = torch::rand({6, 3, 16, 16});
  auto perm = torch::randperm(6);
  for (auto c : all_conditions()) {
    auto a = corruption_for_eval(c, x);
    auto b = corruption_for_eval(c, x.index_select(0, perm));
    CHECK(torch::equal(a.index_select(0, perm), b));
    CHECK(torch::equal(corruption_for_eval(c, x.slice(0, 2, 3)), a.slice(0, 2, 3)));
  }
  CHECK(torch::equal(corruption_for_eval(EvalCondition::kNone, x), x));
  CHECK_FALSE(torch::equal(corruption_for_eval(EvalCondition::kNoise, x), x));
}

TEST_CASE("names and validation") {
  CHECK(parse_condition("ro") == EvalCondition::kRo);
  CHECK(to_string(EvalCondition::kRS) == "RS");
  CHECK_THROWS_AS(parse_condition("blur"), ConfigError);
  CHECK(parse_op_kind("RANDOM_MASK") == OpKind::kRandomMask);
  CHECK_THROWS_AS(parse_op_kind("SHEAR"), ConfigError);
  AntiCollapseOp op;
  op.probability = 1.5;
  CHECK_THROWS_AS(op.validate(), ConfigError);
  const auto set = AntiCollapseSet::standard(5);
  const auto back = AntiCollapseSet::from_json(set.to_json());
  CHECK(back.to_json() == set.to_json());
  CHECK(set.ops.size() == 4);
}
