// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentmark/anti_collapse.hpp"
#include "latentmark/data.hpp"
#include "latentmark/metrics.hpp"
#include "latentmark/victim.hpp"

namespace latentmark {

// 100 * hits / total. ContractError when total == 0.
double percentage(int64_t hits, int64_t total);

// Accuracy (percent) on corruption_for_eval(condition, images) vs labels.
// ContractError on an empty test set.
double compute_cda(ClassifierImpl& victim, const Dataset& clean_test, EvalCondition condition,
                   const EvalCorruptionParams& params = {});

// Percent of non-target test images whose corrupted poisoned version is
// classified as `target`. Images already labelled `target` are excluded.
double compute_asr(ClassifierImpl& victim, const Dataset& clean_test, const InjectFn& inject, int64_t target,
                   EvalCondition condition, const EvalCorruptionParams& params = {});

struct EvalReport {
  std::string method;
  std::string dataset;
  std::map<EvalCondition, double> cda;
  std::map<EvalCondition, double> asr;
  double avg_cda = 0.0;  // mean over the conditions present
  double avg_asr = 0.0;
  std::optional<StealthMetrics> stealth;

  void recompute_averages();
  // ContractError when a percentage leaves [0,100] or an average is stale.
  void check_invariants() const;
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  bool operator==(const EvalReport&) const = default;
};

struct AttackEvalInputs {
  ClassifierImpl* victim = nullptr;
  const Dataset* clean_test = nullptr;
  InjectFn inject;
  int64_t target = 0;
  std::vector<EvalCondition> conditions = all_conditions();
  EvalCorruptionParams params;
};

EvalReport evaluate_attack(const AttackEvalInputs& in, const std::string& method, const std::string& dataset);

// Header: method,dataset,metric,None,RM,Ro,Noise,RS,AVG. One CDA and one ASR
// row; conditions not evaluated are left empty.
std::string report_csv(const EvalReport& report);

// Writes <stem>.csv and <stem>.json. IoError when not writable.
void emit_report(const EvalReport& report, const std::filesystem::path& stem);
EvalReport read_report(const std::filesystem::path& json_path);

}  // namespace latentmark
