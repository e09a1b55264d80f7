// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include <torch/torch.h>

#include "doctest.h"
#include "latentmark/errors.hpp"
#include "latentmark/extractor.hpp"
#include "test_util.hpp"

using namespace latentmark;

namespace {

ExtractionResult constant_result(int levels, int64_t n, int64_t h, int64_t w, double v) {
  ExtractionResult r;
  for (int l = 0; l < levels; ++l) r.maps.push_back(torch::full({n, 1, h, w}, v, torch::kFloat64));
  return r;
}

// Scalar loops over every level, image and pixel.
double brute_extractor_loss(const ExtractionResult& p, const ExtractionResult& c, const torch::Tensor& m) {
  auto mm = m.to(torch::kFloat64).contiguous();
  double total = 0.0;
  for (std::size_t l = 0; l < p.maps.size(); ++l) {
    auto a = p.maps[l].to(torch::kFloat64).contiguous(), b = c.maps[l].to(torch::kFloat64).contiguous();
    const int64_t n = a.size(0), hw = a.size(2) * a.size(3);
    const double *pa = a.data_ptr<double>(), *pb = b.data_ptr<double>(), *pm = mm.data_ptr<double>();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t k = 0; k < hw; ++k) {
        const double d = pa[i * hw + k] - pm[k];
        s += d * d + pb[i * hw + k] * pb[i * hw + k];
      }
    total += s / static_cast<double>(n * hw);
  }
  return total;
}

ExtractionResult random_result(int levels, uint64_t seed) {
  torch::manual_seed(seed);
  ExtractionResult r;
  for (int l = 0; l < levels; ++l) r.maps.push_back(torch::rand({2, 1, 2, 2}, torch::kFloat64));
  return r;
}

}  // namespace

TEST_CASE("extractor loss: worked values") {
  auto m = torch::rand({1, 8, 8}, torch::kFloat64);
  ExtractionResult perfect;
  for (int l = 0; l < 3; ++l) perfect.maps.push_back(m.unsqueeze(0).expand({2, 1, 8, 8}));
  CHECK(extractor_loss(perfect, constant_result(3, 2, 8, 8, 0.0), m).item<double>() == 0.0);
  CHECK(extractor_loss(perfect, constant_result(3, 2, 8, 8, 0.1), m).item<double>() == doctest::Approx(0.03).epsilon(1e-12));
  auto zero = constant_result(3, 2, 8, 8, 0.0);
  CHECK(extractor_loss(zero, zero, torch::zeros({1, 8, 8}, torch::kFloat64)).item<double>() == 0.0);
}

TEST_CASE("extractor loss: scalar oracle, decomposition, non-negativity") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const auto p = random_result(3, seed), c = random_result(3, seed + 100);
    torch::manual_seed(seed + 200);
    auto m = torch::rand({1, 2, 2}, torch::kFloat64);
    const double loss = extractor_loss(p, c, m).item<double>();
    CHECK(std::abs(loss - brute_extractor_loss(p, c, m)) < 1e-12);
    double parts = 0.0;
    for (int l = 0; l < 3; ++l) parts += extractor_level_loss(p.maps[l], c.maps[l], m).item<double>();
    CHECK(std::abs(loss - parts) < 1e-6);
    CHECK(loss > 0.0);
  }
}

TEST_CASE("extractor loss: gradient matches central differences") {
  const auto c = random_result(3, 7);
  torch::manual_seed(8);
  auto m = torch::rand({1, 2, 2}, torch::kFloat64);
  const auto p0 = torch::rand({3, 2, 1, 2, 2}, torch::kFloat64);
  const auto f = [&](const torch::Tensor& stacked) {
    ExtractionResult p;
    for (int64_t l = 0; l < 3; ++l) p.maps.push_back(stacked[l]);
    return extractor_loss(p, c, m);
  };
  CHECK(testutil::max_fd_relative_error(f, p0) < 1e-4);
  // and w.r.t. the watermark
  ExtractionResult p;
  for (int64_t l = 0; l < 3; ++l) p.maps.push_back(p0[l]);
  CHECK(testutil::max_fd_relative_error([&](const torch::Tensor& mm) { return extractor_loss(p, c, mm); }, m) < 1e-4);
}

TEST_CASE("extractor loss: shape guards") {
  auto m = torch::rand({1, 4, 4});
  auto two = constant_result(2, 1, 4, 4, 0.0), three = constant_result(3, 1, 4, 4, 0.0);
  CHECK_THROWS_AS(extractor_loss(two, three, m), ShapeError);
  CHECK_THROWS_AS(extractor_loss(three, three, torch::rand({1, 5, 4})), ShapeError);
}

TEST_CASE("bilinear resize: constants stay constant, sizes are exact") {
  for (auto [h, w] : {std::pair<int64_t, int64_t>{4, 4}, {8, 8}, {3, 5}}) {
    auto x = torch::full({2, 1, h, w}, 0.37);
    auto y = bilinear_resize(x, 32, 32);
    CHECK(y.sizes() == torch::IntArrayRef({2, 1, 32, 32}));
    CHECK((y - 0.37).abs().max().item<double>() < 1e-6);
  }
}

TEST_CASE("extractor: one map per supervised level at input resolution") {
  ExtractorConfig cfg;
  cfg.base_channels = 8;
  TriggerExtractor net(cfg, 1);
  auto x = torch::rand({2, 3, 32, 32});
  const auto r = extract(net, x);
  CHECK(r.maps.size() == 3);
  for (const auto& map : r.maps) {
    CHECK(map.sizes() == torch::IntArrayRef({2, 1, 32, 32}));
    CHECK(torch::isfinite(map).all().item<bool>());
  }
  CHECK_FALSE(r.maps.front().requires_grad());

  cfg.supervised_levels = 1;
  TriggerExtractor one(cfg, 1);
  CHECK(extract(one, x).maps.size() == 1);
}

TEST_CASE("extractor: seeded construction is deterministic") {
  ExtractorConfig cfg;
  cfg.base_channels = 8;
  TriggerExtractor a(cfg, 3), b(cfg, 3);
  auto x = torch::rand({1, 3, 16, 16});
  CHECK(torch::equal(extract(a, x).finest(), extract(b, x).finest()));
}

TEST_CASE("extractor config validation") {
  ExtractorConfig c;
  c.supervised_levels = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.supervised_levels = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ExtractorConfig{};
  CHECK(ExtractorConfig::from_json(c.to_json()) == c);
}
