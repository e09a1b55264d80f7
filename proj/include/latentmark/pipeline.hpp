// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

// Stage orchestration. Each stage owns <output_dir>/<stage>/ and finishes by
// writing manifest.json: the stage-scoped config hash, the seed, the config
// sections it read, and SHA-256 digests of its inputs and outputs. A stage
// whose manifest matches the current config and whose outputs verify is
// skipped; a manifest that disagrees with the config or with the upstream
// artifacts raises StalenessError unless forced.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentmark/config.hpp"

namespace latentmark {

enum class Stage { kTrainInjector, kPoison, kTrainVictim, kEvaluate, kDefend };

std::string to_string(Stage s);
Stage parse_stage(const std::string& s);  // train-injector | poison | train-victim | evaluate | defend
const std::vector<Stage>& all_stages();   // dependency order

// Upstream stages whose artifacts `s` reads under `cfg` (poison and evaluate
// need the injector only in LEARNED_INJECTOR mode).
std::vector<Stage> dependencies(Stage s, const ExperimentConfig& cfg);

std::filesystem::path stage_dir(const ExperimentConfig& cfg, Stage s);

// Hash of the config sections stage `s` reads, plus the global seed.
std::string stage_config_hash(const ExperimentConfig& cfg, Stage s);

struct RunOptions {
  bool force = false;  // re-run requested stages even when up to date or stale
};

struct StageOutcome {
  Stage stage;
  bool ran = false;  // false: skipped as up to date
};

// Runs the requested stages in dependency order. DependencyError when a
// needed upstream stage is neither requested nor complete on disk.
std::vector<StageOutcome> run_pipeline(const ExperimentConfig& cfg, const std::vector<Stage>& stages,
                                       const RunOptions& options = {});

// True when the stage's manifest exists, matches cfg and its outputs verify.
bool stage_complete(const ExperimentConfig& cfg, Stage s);

nlohmann::json read_manifest(const std::filesystem::path& stage_directory);

// Regenerates <output_dir>/report.{json,md} from the cached evaluate/defend
// outputs without retraining. DependencyError if neither exists.
nlohmann::json write_summary_report(const ExperimentConfig& cfg);

}  // namespace latentmark
