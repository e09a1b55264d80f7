// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

// latentmark: command-line front end for the stage pipeline.
//
//   latentmark train-injector --config exp.json [--profile desk] [--seed N] [--force]
//   latentmark run --stages train-injector,poison,train-victim,evaluate,defend
//   latentmark evaluate --conditions None,RM,Ro
//   latentmark report
//   latentmark show-config

#include <torch/torch.h>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "latentmark/config.hpp"
#include "latentmark/errors.hpp"
#include "latentmark/log.hpp"
#include "latentmark/pipeline.hpp"

namespace lm = latentmark;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string profile;
  std::optional<uint64_t> seed;
  std::string out;
  bool force = false;
  std::vector<std::string> conditions;
  bool quiet = false;
};

lm::ExperimentConfig resolve(const CommonFlags& f) {
  std::optional<lm::Profile> profile;
  if (!f.profile.empty()) profile = lm::parse_profile(f.profile);
  lm::ExperimentConfig cfg;
  if (f.config_path.empty()) {
    nlohmann::json raw = nlohmann::json::object();
    if (profile) raw["profile"] = lm::to_string(*profile);
    cfg = lm::validate_config(raw, profile.value_or(lm::Profile::kDesk));
  } else {
    cfg = lm::load_config_file(f.config_path, profile);
  }
  if (f.seed) lm::apply_global_seed(cfg, *f.seed);
  if (!f.out.empty()) cfg.output_dir = f.out;
  if (!f.conditions.empty()) {
    cfg.conditions.clear();
    for (const auto& c : f.conditions) cfg.conditions.push_back(lm::parse_condition(c));
  }
  return cfg;
}

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "Experiment config (JSON); omitted = profile defaults");
  cmd->add_option("--profile", f.profile, "Default profile: desk | paper")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seed", f.seed, "Global seed (overrides the config)");
  cmd->add_option("--out", f.out, "Output directory (overrides the config)");
  cmd->add_flag("--force", f.force, "Re-run requested stages even if complete or stale");
  cmd->add_flag("-q,--quiet", f.quiet, "Only warnings and errors");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latentmark: learnable invisible-watermark backdoor toolkit"};
  app.require_subcommand(1);
  CommonFlags flags;

  struct StageCommand {
    CLI::App* cmd;
    lm::Stage stage;
  };
  std::vector<StageCommand> stage_cmds;
  for (lm::Stage s : lm::all_stages()) {
    auto* cmd = app.add_subcommand(lm::to_string(s), "Run the " + lm::to_string(s) + " stage");
    add_common(cmd, flags);
    if (s == lm::Stage::kEvaluate)
      cmd->add_option("--conditions", flags.conditions, "Corruption conditions (None,RM,Ro,Noise,RS)")->delimiter(',');
    stage_cmds.push_back({cmd, s});
  }
  std::vector<std::string> stage_names;
  auto* run = app.add_subcommand("run", "Run several stages in dependency order");
  add_common(run, flags);
  run->add_option("--stages", stage_names, "Comma-separated stages (default: all)")->delimiter(',');
  run->add_option("--conditions", flags.conditions, "Corruption conditions for evaluate")->delimiter(',');
  auto* report = app.add_subcommand("report", "Regenerate report.{json,md} from cached stage outputs");
  add_common(report, flags);
  auto* show = app.add_subcommand("show-config", "Print the fully resolved configuration");
  add_common(show, flags);

  CLI11_PARSE(app, argc, argv);
  if (flags.quiet) lm::set_log_level(lm::LogLevel::kWarn);
  torch::set_num_threads(1);

  std::string scope = "latentmark";
  try {
    const auto cfg = resolve(flags);
    if (show->parsed()) {
      std::cout << cfg.to_json().dump(2) << "\n";
      return 0;
    }
    if (report->parsed()) {
      scope = "report";
      std::cout << lm::write_summary_report(cfg).dump(2) << "\n";
      return 0;
    }
    std::vector<lm::Stage> stages;
    for (const auto& sc : stage_cmds)
      if (sc.cmd->parsed()) stages.push_back(sc.stage);
    if (run->parsed()) {
      if (stage_names.empty()) stages = lm::all_stages();
      for (const auto& n : stage_names) stages.push_back(lm::parse_stage(n));
    }
    if (stages.size() == 1) scope = lm::to_string(stages.front());
    for (const auto& o : lm::run_pipeline(cfg, stages, {flags.force}))
      std::cout << lm::to_string(o.stage) << ": " << (o.ran ? "done" : "up to date") << "\n";
    return 0;
  } catch (const lm::Error& e) {
    std::cerr << scope << ": error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << scope << ": unexpected error: " << e.what() << "\n";
    return 2;
  }
}
