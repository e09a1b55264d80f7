// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include <torch/script.h>
#include <torch/torch.h>

#include <cmath>
#include <fstream>

#include "doctest.h"
#include "latentmark/errors.hpp"
#include "latentmark/evaluation.hpp"
#include "test_util.hpp"

using namespace latentmark;

namespace {

constexpr int64_t kClasses = 4;

// Class = floor(K * x[0,0,0]).
class StubClassifier : public ClassifierImpl {
 public:
  torch::Tensor forward(const torch::Tensor& x) override {
    auto cls =
        (x.select(1, 0).select(1, 0).select(1, 0) * static_cast<double>(kClasses)).floor().clamp(0, kClasses - 1);
    return torch::one_hot(cls.to(torch::kInt64), kClasses).to(torch::kFloat32);
  }
};

// Images whose encoded class matches the label for the first `correct` entries.
Dataset coded_dataset(int64_t n, int64_t correct) {
  Dataset d;
  d.name = "coded";
  d.num_classes = kClasses;
  d.images = torch::full({n, 3, 8, 8}, 0.5f);
  d.labels = torch::zeros({n}, torch::kInt64);
  for (int64_t i = 0; i < n; ++i) {
    const int64_t label = i % kClasses;
    const int64_t coded = i < correct ? label : (label + 1) % kClasses;
    d.labels[i] = label;
    d.images[i][0][0][0] = (static_cast<double>(coded) + 0.5) / kClasses;
  }
  return d;
}

InjectFn stamp(int64_t target) {
  return [target](const torch::Tensor& x) {
    auto y = x.clone();
    y.select(1, 0).select(1, 0).select(1, 0).fill_((static_cast<double>(target) + 0.5) / kClasses);
    return y;
  };
}

// Double-precision reference SSIM with the same window, scalar loops.
double brute_ssim(const torch::Tensor& a, const torch::Tensor& b) {
  const int64_t n = a.size(0), c = a.size(1), h = a.size(2), w = a.size(3);
  const int64_t win = std::min<int64_t>({11, h, w});
  std::vector<double> g(static_cast<std::size_t>(win));
  double gs = 0.0;
  for (int64_t i = 0; i < win; ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(win - 1) / 2.0;
    g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2 * 1.5 * 1.5));
    gs += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) v /= gs;
  auto A = a.to(torch::kFloat64).contiguous(), B = b.to(torch::kFloat64).contiguous();
  auto pa = A.accessor<double, 4>(), pb = B.accessor<double, 4>();
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  int64_t count = 0;
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci) {
      double plane = 0.0;
      int64_t positions = 0;
      for (int64_t y = 0; y + win <= h; ++y)
        for (int64_t x = 0; x + win <= w; ++x) {
          double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
          for (int64_t u = 0; u < win; ++u)
            for (int64_t v = 0; v < win; ++v) {
              const double wt = g[static_cast<std::size_t>(u)] * g[static_cast<std::size_t>(v)];
              const double va = pa[ni][ci][y + u][x + v], vb = pb[ni][ci][y + u][x + v];
              ma += wt * va;
              mb += wt * vb;
              saa += wt * va * va;
              sbb += wt * vb * vb;
              sab += wt * va * vb;
            }
          const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
          plane += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
          ++positions;
        }
      total += plane / static_cast<double>(positions);
      ++count;
    }
  return total / static_cast<double>(count);
}

}  // namespace

TEST_CASE("percentages: worked values") {
  CHECK(percentage(7, 10) == doctest::Approx(70.0));
  CHECK(percentage(47, 50) == doctest::Approx(94.0));
  CHECK_THROWS_AS(percentage(0, 0), ContractError);
}

TEST_CASE("CDA and ASR on a stub classifier") {
  StubClassifier stub;
  const auto d = coded_dataset(10, 7);
  CHECK(compute_cda(stub, d, EvalCondition::kNone) == doctest::Approx(70.0));
  CHECK(compute_asr(stub, d, stamp(2), 2, EvalCondition::kNone) == doctest::Approx(100.0));
  // identity "trigger": only images already coded as the target count, and label-2 images are excluded
  const double asr_identity = compute_asr(stub, d, [](const torch::Tensor& x) { return x; }, 2, EvalCondition::kNone);
  // 8 non-target images; only index 9 (label 1, miscoded as 2) lands on the target
  CHECK(asr_identity == doctest::Approx(100.0 / 8.0));
  Dataset empty;
  empty.num_classes = kClasses;
  CHECK_THROWS_AS(compute_cda(stub, empty, EvalCondition::kNone), ContractError);
  CHECK_THROWS_AS(compute_asr(stub, d, [](const torch::Tensor& x) { return x.slice(3, 0, 4); }, 2, EvalCondition::kNone),
                  ShapeError);
}

TEST_CASE("CDA and ASR are invariant to test-set order") {
  StubClassifier stub;
  const auto d = coded_dataset(40, 25);
  auto shuffled = d;
  auto perm = torch::randperm(40);
  shuffled.images = d.images.index_select(0, perm);
  shuffled.labels = d.labels.index_select(0, perm);
  for (auto c : all_conditions()) {
    CHECK(compute_cda(stub, d, c) == compute_cda(stub, shuffled, c));
    CHECK(compute_asr(stub, d, stamp(1), 1, c) == compute_asr(stub, shuffled, stamp(1), 1, c));
  }
}

TEST_CASE("PSNR: worked values, identity cap, symmetry") {
  auto a = torch::full({2, 3, 8, 8}, 0.5);
  CHECK(psnr(a, a + 0.1) == doctest::Approx(20.0).epsilon(1e-6));
  CHECK(psnr(a, a) == kPsnrCapDb);
  CHECK(psnr_from_mse(0.01) == doctest::Approx(20.0));
  torch::manual_seed(0);
  auto x = torch::rand({3, 3, 16, 16}), y = torch::rand({3, 3, 16, 16});
  CHECK(psnr(x, y) == doctest::Approx(psnr(y, x)).epsilon(1e-12));
}

TEST_CASE("SSIM: identity, symmetry, range, scalar oracle") {
  torch::manual_seed(1);
  auto x = torch::rand({2, 3, 16, 16}), y = (x + torch::randn_like(x) * 0.1).clamp(0, 1);
  CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(ssim(x, y) == doctest::Approx(ssim(y, x)).epsilon(1e-9));
  const double s = ssim(x, y);
  CHECK(s > -1.0);
  CHECK(s < 1.0);
  CHECK(std::abs(s - brute_ssim(x, y)) < 1e-5);
  // windows shrink for tiny images
  auto t = torch::rand({1, 1, 6, 6});
  CHECK(std::abs(ssim(t, t * 0.9) - brute_ssim(t, t * 0.9)) < 1e-5);
}

TEST_CASE("perceptual distances: zero on identity, non-negative, symmetric") {
  torch::manual_seed(2);
  auto x = torch::rand({2, 3, 16, 16}), y = torch::rand({2, 3, 16, 16});
  RandomFeatureDistance rf;
  CHECK(rf.distance(x, x) == doctest::Approx(0.0));
  CHECK(rf.distance(x, y) > 0.0);
  CHECK(rf.distance(x, y) == doctest::Approx(rf.distance(y, x)));
  CHECK_FALSE(rf.comparable());
  const auto m = measure_stealth(x, x, rf);
  CHECK(m.psnr == kPsnrCapDb);
  CHECK(m.ssim == doctest::Approx(1.0));
  CHECK(m.lpips == doctest::Approx(0.0));
  CHECK(m.lpips_backend == "random-features");
}

TEST_CASE("TorchScript perceptual backend") {
  testutil::TempDir tmp;
  torch::jit::Module mod("Dist");
  mod.define(R"(
def forward(self, a, b):
    return ((a - b) ** 2).mean(dim=[1, 2, 3])
)");
  const auto path = tmp.path() / "dist.pt";
  mod.save(path.string());
  auto d = make_perceptual_distance(path);
  CHECK(d->comparable());
  auto x = torch::full({2, 3, 4, 4}, 0.25), y = torch::full({2, 3, 4, 4}, 0.5);
  // inputs are mapped to [-1,1], so a 0.25 gap becomes 0.5
  CHECK(d->distance(x, y) == doctest::Approx(0.25));
  CHECK(d->distance(x, x) == doctest::Approx(0.0));
  CHECK_THROWS_AS(make_perceptual_distance(tmp.path() / "missing.pt"), IoError);
  CHECK(make_perceptual_distance(std::nullopt)->name() == "random-features");
}

TEST_CASE("reports: averages, invariants, JSON and CSV") {
  StubClassifier stub;
  const auto d = coded_dataset(20, 15);
  AttackEvalInputs in;
  in.victim = &stub;
  in.clean_test = &d;
  in.inject = stamp(3);
  in.target = 3;
  auto r = evaluate_attack(in, "latentmark", "coded");
  CHECK(r.cda.size() == 5);
  CHECK(r.cda.at(EvalCondition::kNone) == doctest::Approx(75.0));
  double sum = 0;
  for (const auto& [c, v] : r.cda) sum += v;
  CHECK(r.avg_cda == doctest::Approx(sum / 5));
  r.check_invariants();
  CHECK_FALSE(r.stealth.has_value());

  auto stale = r;
  stale.avg_asr += 1;
  CHECK_THROWS_AS(stale.check_invariants(), ContractError);
  auto out_of_range = r;
  out_of_range.cda[EvalCondition::kRM] = 101;
  out_of_range.recompute_averages();
  CHECK_THROWS_AS(out_of_range.check_invariants(), ContractError);

  r.stealth = StealthMetrics{31.5, 0.97, 0.01, "random-features", false};
  CHECK(EvalReport::from_json(r.to_json()) == r);

  testutil::TempDir tmp;
  emit_report(r, tmp.path() / "eval");
  CHECK(read_report(tmp.path() / "eval.json") == r);
  std::ifstream csv(tmp.path() / "eval.csv");
  std::string header, cda_row, asr_row;
  std::getline(csv, header);
  std::getline(csv, cda_row);
  std::getline(csv, asr_row);
  CHECK(header == "method,dataset,metric,None,RM,Ro,Noise,RS,AVG");
  CHECK(cda_row.rfind("latentmark,coded,CDA,75", 0) == 0);
  CHECK(asr_row.rfind("latentmark,coded,ASR,", 0) == 0);

  // Subset of conditions: missing cells stay empty, average over present ones.
  in.conditions = {EvalCondition::kNone, EvalCondition::kRo};
  const auto sub = evaluate_attack(in, "m", "d");
  CHECK(sub.cda.size() == 2);
  CHECK(report_csv(sub).find("m,d,CDA,") != std::string::npos);
  CHECK(sub.avg_cda == doctest::Approx((sub.cda.at(EvalCondition::kNone) + sub.cda.at(EvalCondition::kRo)) / 2));
}
