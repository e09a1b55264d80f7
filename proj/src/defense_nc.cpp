// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include "latentmark/defense_nc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "latentmark/errors.hpp"
#include "latentmark/log.hpp"
#include "latentmark/rng.hpp"

namespace F = torch::nn::functional;

namespace latentmark {

void DefenseConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("defense: tau must be > 0");
  if (!(mask_l1_weight > 0.0)) throw ConfigError("defense: mask_l1_weight must be > 0");
  if (steps <= 0) throw ConfigError("defense: steps must be > 0");
  if (clean_budget < 1 || batch_size < 1) throw ConfigError("defense: clean_budget and batch_size must be >= 1");
  optimizer.validate("defense.optimizer");
}

nlohmann::json DefenseConfig::to_json() const {
  return {{"tau", tau},
          {"mask_l1_weight", mask_l1_weight},
          {"steps", steps},
          {"optimizer", optimizer.to_json()},
          {"clean_budget", clean_budget},
          {"batch_size", batch_size},
          {"seed", seed}};
}

DefenseConfig DefenseConfig::from_json(const nlohmann::json& j) {
  DefenseConfig c;
  c.tau = j.value("tau", c.tau);
  c.mask_l1_weight = j.value("mask_l1_weight", c.mask_l1_weight);
  c.steps = j.value("steps", c.steps);
  if (j.contains("optimizer")) c.optimizer = OptimizerSpec::from_json(j.at("optimizer"));
  c.clean_budget = j.value("clean_budget", c.clean_budget);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

// Freezes a module's parameters for the lifetime of the guard.
class FreezeGuard {
 public:
  explicit FreezeGuard(torch::nn::Module& m) : params_(m.parameters()) {
    for (auto& p : params_) {
      saved_.push_back(p.requires_grad());
      p.set_requires_grad(false);
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(saved_[i]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<torch::Tensor> params_;
  std::vector<bool> saved_;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

ReversedTrigger reverse_trigger(ClassifierImpl& victim, const torch::Tensor& clean_samples, int64_t target,
                                const DefenseConfig& cfg) {
  cfg.validate();
  if (clean_samples.dim() != 4 || clean_samples.size(0) == 0)
    throw ContractError("reverse_trigger: clean samples must be a non-empty (N,C,H,W) batch");
  const int64_t n = clean_samples.size(0), c = clean_samples.size(1), h = clean_samples.size(2),
                w = clean_samples.size(3);
  const bool was_training = victim.is_training();
  victim.eval();
  FreezeGuard freeze(victim);

  auto gen = at::make_generator<at::CPUGeneratorImpl>(derive_seed({cfg.seed, 0x4ec, static_cast<uint64_t>(target)}));
  auto mask_raw = (torch::randn({1, h, w}, gen) * 0.1).set_requires_grad(true);
  auto pattern_raw = (torch::randn({c, h, w}, gen) * 0.1).set_requires_grad(true);
  auto opt = cfg.optimizer.make({mask_raw, pattern_raw});

  ReversedTrigger out;
  out.target = target;
  const auto x_all = clean_samples.to(torch::kFloat32);
  for (int64_t step = 0; step < cfg.steps; ++step) {
    const int64_t s = (step * cfg.batch_size) % n;
    const auto x = x_all.slice(0, s, std::min(n, s + cfg.batch_size));
    const auto mask = (torch::tanh(mask_raw) + 1.0) / 2.0;
    const auto pattern = (torch::tanh(pattern_raw) + 1.0) / 2.0;
    const auto stamped = x * (1.0 - mask) + pattern * mask;
    const auto labels = torch::full({x.size(0)}, target, torch::kInt64);
    const auto loss = F::cross_entropy(victim.forward(stamped), labels) + cfg.mask_l1_weight * mask.sum();
    out.final_loss = loss.item<double>();
    if (!std::isfinite(out.final_loss)) {
      out.converged = false;
      break;
    }
    opt->zero_grad();
    loss.backward();
    opt->step();
  }
  if (was_training) victim.train();
  torch::NoGradGuard no_grad;
  out.mask = ((torch::tanh(mask_raw) + 1.0) / 2.0).detach();
  out.pattern = ((torch::tanh(pattern_raw) + 1.0) / 2.0).detach();
  out.mask_l1 = out.mask.to(torch::kFloat64).sum().item<double>();
  if (!std::isfinite(out.mask_l1)) out.converged = false;
  return out;
}

AnomalyResult anomaly_index(const std::vector<double>& norms) {
  if (norms.size() < 3) throw ContractError("anomaly_index needs at least 3 classes");
  AnomalyResult r;
  const double med = median(norms);
  std::vector<double> dev(norms.size());
  for (std::size_t i = 0; i < norms.size(); ++i) dev[i] = std::abs(norms[i] - med);
  const double mad = median(dev);
  r.min_class = static_cast<std::size_t>(std::min_element(norms.begin(), norms.end()) - norms.begin());
  r.indices.assign(norms.size(), 0.0);
  if (mad == 0.0) {
    r.degenerate = true;
    return r;
  }
  for (std::size_t i = 0; i < norms.size(); ++i) r.indices[i] = dev[i] / (1.4826 * mad);
  // One-sided: only an abnormally small norm signals a backdoor.
  r.model_index = norms[r.min_class] < med ? r.indices[r.min_class] : 0.0;
  return r;
}

DefenseReport run_neural_cleanse(ClassifierImpl& victim, const Dataset& clean, const DefenseConfig& cfg,
                                 std::vector<ReversedTrigger>* triggers) {
  cfg.validate();
  if (clean.size() == 0) throw ContractError("neural cleanse: no clean samples");
  const Dataset sample = take_subset(clean, std::min(cfg.clean_budget, clean.size()), cfg.seed);
  DefenseReport rep;
  rep.tau = cfg.tau;
  std::vector<double> ok_norms;
  std::vector<std::size_t> ok_classes;
  for (int64_t k = 0; k < clean.num_classes; ++k) {
    auto t = reverse_trigger(victim, sample.images, k, cfg);
    rep.mask_l1.push_back(t.converged ? t.mask_l1 : std::numeric_limits<double>::quiet_NaN());
    rep.failed.push_back(!t.converged);
    if (t.converged) {
      ok_norms.push_back(t.mask_l1);
      ok_classes.push_back(static_cast<std::size_t>(k));
    } else {
      LM_LOG(kWarn) << "neural cleanse: class " << k << " did not converge; excluded from anomaly statistics";
    }
    LM_LOG(kInfo) << "neural cleanse class " << k << " mask_l1=" << t.mask_l1;
    if (triggers != nullptr) triggers->push_back(std::move(t));
  }
  rep.anomaly.assign(static_cast<std::size_t>(clean.num_classes), std::numeric_limits<double>::quiet_NaN());
  const auto a = anomaly_index(ok_norms);
  for (std::size_t i = 0; i < ok_classes.size(); ++i) rep.anomaly[ok_classes[i]] = a.indices[i];
  rep.flagged_class = ok_classes[a.min_class];
  rep.model_index = a.model_index;
  rep.degenerate = a.degenerate;
  rep.flagged = rep.model_index > cfg.tau;
  return rep;
}

nlohmann::json DefenseReport::to_json() const {
  auto nums = [](const std::vector<double>& v) {
    nlohmann::json j = nlohmann::json::array();
    for (double x : v) j.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr));
    return j;
  };
  return {{"mask_l1", nums(mask_l1)},     {"failed", failed},   {"anomaly_index", nums(anomaly)},
          {"flagged_class", flagged_class}, {"model_index", model_index}, {"tau", tau},
          {"degenerate", degenerate},       {"verdict", flagged ? "backdoored" : "clean"}};
}

DefenseReport DefenseReport::from_json(const nlohmann::json& j) {
  auto nums = [](const nlohmann::json& a) {
    std::vector<double> v;
    for (const auto& x : a) v.push_back(x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>());
    return v;
  };
  DefenseReport r;
  r.mask_l1 = nums(j.at("mask_l1"));
  r.failed = j.at("failed").get<std::vector<bool>>();
  r.anomaly = nums(j.at("anomaly_index"));
  r.flagged_class = j.at("flagged_class").get<std::size_t>();
  r.model_index = j.at("model_index").get<double>();
  r.tau = j.at("tau").get<double>();
  r.degenerate = j.at("degenerate").get<bool>();
  r.flagged = j.at("verdict").get<std::string>() == "backdoored";
  return r;
}

void write_defense_report(const DefenseReport& report, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << report.to_json().dump(2) << '\n';
}

}  // namespace latentmark
