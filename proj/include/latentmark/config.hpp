// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

// Experiment configuration: one JSON document aggregating every module's
// settings, filled from a named profile and validated as a whole.

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentmark/anti_collapse.hpp"
#include "latentmark/data.hpp"
#include "latentmark/defense_nc.hpp"
#include "latentmark/extractor.hpp"
#include "latentmark/injector.hpp"
#include "latentmark/joint_trainer.hpp"
#include "latentmark/victim.hpp"

namespace latentmark {

enum class Profile { kDesk, kPaper };
std::string to_string(Profile p);
Profile parse_profile(const std::string& s);  // desk | paper

struct ExperimentConfig {
  Profile profile = Profile::kDesk;
  uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/latentmark";

  DatasetSpec train_data;
  DatasetSpec test_data;
  int64_t injector_train_limit = 5000;  // subset of train_data for joint training (0 = all)
  PoisonSpec poison;
  InjectorConfig injector;
  ExtractorConfig extractor;
  AntiCollapseSet anti_collapse;
  JointLossConfig loss;
  TrainSchedule schedule;
  VictimConfig victim;
  DefenseConfig defense;
  EvalCorruptionParams eval_corruption;
  std::vector<EvalCondition> conditions = all_conditions();
  int64_t stealth_samples = 500;        // test images used for PSNR/SSIM/LPIPS
  std::string lpips_module;             // TorchScript file; empty = random-feature fallback

  nlohmann::json to_json() const;
  // SHA-256 of the canonical (sorted-key, compact) JSON.
  std::string hash() const;
};

// Complete profile documents; every key a config file may set appears here.
nlohmann::json profile_defaults(Profile p);

struct ConfigDiagnostics {
  std::vector<std::string> defaults_applied;  // "path = value" for every filled default
};

// Fills missing keys from the profile (`profile` in the document, else
// `fallback_profile`), rejects unknown keys, parses and validates every
// section. All problems are collected and raised together as one ConfigError
// whose message lists "path: reason" lines. Component seeds are derived from
// the global seed.
ExperimentConfig validate_config(const nlohmann::json& raw, Profile fallback_profile = Profile::kDesk,
                                 ConfigDiagnostics* diagnostics = nullptr);

// Parses the file (an empty file is an empty document) and validates it.
// IoError when unreadable, ConfigError on malformed JSON or invalid values.
ExperimentConfig load_config_file(const std::filesystem::path& path, std::optional<Profile> profile_override = {},
                                  ConfigDiagnostics* diagnostics = nullptr);

// Rewrites the seed-derived fields after the global seed changes.
void apply_global_seed(ExperimentConfig& cfg, uint64_t seed);

}  // namespace latentmark
