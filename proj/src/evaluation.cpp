// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include "latentmark/evaluation.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "latentmark/errors.hpp"

namespace latentmark {
namespace {

constexpr int64_t kChunk = 256;

void require_victim_shape(ClassifierImpl& /*victim*/, const Dataset& d) {
  if (d.size() == 0) throw ContractError("evaluation: empty test set");
  if (d.images.dim() != 4) throw ShapeError("evaluation: test images must be (N,C,H,W)");
}

}  // namespace

double percentage(int64_t hits, int64_t total) {
  if (total <= 0) throw ContractError("percentage of an empty set");
  return 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

double compute_cda(ClassifierImpl& victim, const Dataset& clean_test, EvalCondition condition,
                   const EvalCorruptionParams& params) {
  require_victim_shape(victim, clean_test);
  int64_t hits = 0;
  for (int64_t s = 0; s < clean_test.size(); s += kChunk) {
    const int64_t e = std::min(clean_test.size(), s + kChunk);
    const auto x = corruption_for_eval(condition, clean_test.images.slice(0, s, e), params);
    hits += predict(victim, x).eq(clean_test.labels.slice(0, s, e)).sum().item<int64_t>();
  }
  return percentage(hits, clean_test.size());
}

double compute_asr(ClassifierImpl& victim, const Dataset& clean_test, const InjectFn& inject, int64_t target,
                   EvalCondition condition, const EvalCorruptionParams& params) {
  require_victim_shape(victim, clean_test);
  const Dataset pool = exclude_label(clean_test, target);
  if (pool.size() == 0) throw ContractError("compute_asr: no test images outside the target class");
  int64_t hits = 0;
  for (int64_t s = 0; s < pool.size(); s += kChunk) {
    const int64_t e = std::min(pool.size(), s + kChunk);
    const auto poisoned = inject(pool.images.slice(0, s, e));
    if (poisoned.sizes() != pool.images.slice(0, s, e).sizes())
      throw ShapeError("compute_asr: injector output " + c10::str(poisoned.sizes()) + " does not match test images");
    hits += predict(victim, corruption_for_eval(condition, poisoned, params)).eq(target).sum().item<int64_t>();
  }
  return percentage(hits, pool.size());
}

void EvalReport::recompute_averages() {
  auto mean = [](const std::map<EvalCondition, double>& m) {
    if (m.empty()) return 0.0;
    double s = 0.0;
    for (const auto& [c, v] : m) s += v;
    return s / static_cast<double>(m.size());
  };
  avg_cda = mean(cda);
  avg_asr = mean(asr);
}

void EvalReport::check_invariants() const {
  auto check = [](const std::map<EvalCondition, double>& m, double avg, const char* what) {
    double s = 0.0;
    for (const auto& [c, v] : m) {
      if (!(v >= 0.0 && v <= 100.0))
        throw ContractError(std::string(what) + " " + to_string(c) + " out of [0,100]: " + std::to_string(v));
      s += v;
    }
    if (!m.empty() && std::abs(s / static_cast<double>(m.size()) - avg) > 1e-9)
      throw ContractError(std::string(what) + " average does not match its columns");
  };
  check(cda, avg_cda, "CDA");
  check(asr, avg_asr, "ASR");
}

nlohmann::json EvalReport::to_json() const {
  auto cols = [](const std::map<EvalCondition, double>& m) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [c, v] : m) j[to_string(c)] = v;
    return j;
  };
  nlohmann::json j = {{"method", method}, {"dataset", dataset}, {"cda", cols(cda)},
                      {"asr", cols(asr)}, {"avg_cda", avg_cda}, {"avg_asr", avg_asr}};
  j["stealth"] = stealth ? stealth->to_json() : nlohmann::json(nullptr);
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.method = j.at("method").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  for (const auto& [k, v] : j.at("cda").items()) r.cda[parse_condition(k)] = v.get<double>();
  for (const auto& [k, v] : j.at("asr").items()) r.asr[parse_condition(k)] = v.get<double>();
  r.avg_cda = j.at("avg_cda").get<double>();
  r.avg_asr = j.at("avg_asr").get<double>();
  if (j.contains("stealth") && !j.at("stealth").is_null()) r.stealth = StealthMetrics::from_json(j.at("stealth"));
  return r;
}

EvalReport evaluate_attack(const AttackEvalInputs& in, const std::string& method, const std::string& dataset) {
  if (in.victim == nullptr || in.clean_test == nullptr) throw ContractError("evaluate_attack: victim and test set required");
  EvalReport r;
  r.method = method;
  r.dataset = dataset;
  for (EvalCondition c : in.conditions) {
    r.cda[c] = compute_cda(*in.victim, *in.clean_test, c, in.params);
    if (in.inject) r.asr[c] = compute_asr(*in.victim, *in.clean_test, in.inject, in.target, c, in.params);
  }
  r.recompute_averages();
  return r;
}

namespace {

// Shortest decimal that parses back to the same double.
std::string shortest(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string report_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "method,dataset,metric";
  for (EvalCondition c : all_conditions()) os << ',' << to_string(c);
  os << ",AVG\n";
  auto row = [&](const char* metric, const std::map<EvalCondition, double>& m, double avg) {
    os << report.method << ',' << report.dataset << ',' << metric;
    for (EvalCondition c : all_conditions()) {
      os << ',';
      if (auto it = m.find(c); it != m.end()) os << shortest(it->second);
    }
    os << ',' << shortest(avg) << '\n';
  };
  row("CDA", report.cda, report.avg_cda);
  if (!report.asr.empty()) row("ASR", report.asr, report.avg_asr);
  return os.str();
}

void emit_report(const EvalReport& report, const std::filesystem::path& stem) {
  report.check_invariants();
  auto write = [](const std::filesystem::path& p, const std::string& body) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out << body;
    if (!out) throw IoError("write failed for " + p.string());
  };
  auto csv = stem, json = stem;
  write(csv.replace_extension(".csv"), report_csv(report));
  write(json.replace_extension(".json"), report.to_json().dump(2) + "\n");
}

EvalReport read_report(const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw IoError("cannot read " + json_path.string());
  return EvalReport::from_json(nlohmann::json::parse(in));
}

}  // namespace latentmark
