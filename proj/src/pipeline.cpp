// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include "latentmark/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "latentmark/errors.hpp"
#include "latentmark/evaluation.hpp"
#include "latentmark/hashing.hpp"
#include "latentmark/log.hpp"
#include "latentmark/metrics.hpp"
#include "latentmark/rng.hpp"

namespace fs = std::filesystem;

namespace latentmark {

std::string to_string(Stage s) {
  switch (s) {
    case Stage::kTrainInjector:
      return "train-injector";
    case Stage::kPoison:
      return "poison";
    case Stage::kTrainVictim:
      return "train-victim";
    case Stage::kEvaluate:
      return "evaluate";
    case Stage::kDefend:
      return "defend";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  for (Stage st : all_stages())
    if (to_string(st) == s) return st;
  throw ConfigError("unknown stage '" + s + "' (expected train-injector|poison|train-victim|evaluate|defend)");
}

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> all = {Stage::kTrainInjector, Stage::kPoison, Stage::kTrainVictim, Stage::kEvaluate,
                                         Stage::kDefend};
  return all;
}

std::vector<Stage> dependencies(Stage s, const ExperimentConfig& cfg) {
  const bool learned = cfg.poison.mode == InjectionMode::kLearnedInjector;
  switch (s) {
    case Stage::kTrainInjector:
      return {};
    case Stage::kPoison:
      return learned ? std::vector<Stage>{Stage::kTrainInjector} : std::vector<Stage>{};
    case Stage::kTrainVictim:
      return {Stage::kPoison};
    case Stage::kEvaluate:
      return learned ? std::vector<Stage>{Stage::kTrainInjector, Stage::kTrainVictim}
                     : std::vector<Stage>{Stage::kTrainVictim};
    case Stage::kDefend:
      return {Stage::kTrainVictim};
  }
  return {};
}

fs::path stage_dir(const ExperimentConfig& cfg, Stage s) { return cfg.output_dir / to_string(s); }

namespace {

constexpr int kManifestVersion = 1;

nlohmann::json stage_config(const ExperimentConfig& cfg, Stage s) {
  const auto all = cfg.to_json();
  auto pick = [&](std::initializer_list<const char*> keys) {
    nlohmann::json j = {{"seed", cfg.seed}};
    for (const char* k : keys) j[k] = all.at(k);
    return j;
  };
  switch (s) {
    case Stage::kTrainInjector:
      return pick({"train_data", "injector_train_limit", "injector", "extractor", "anti_collapse", "loss", "schedule"});
    case Stage::kPoison:
      return pick({"train_data", "poison"});
    case Stage::kTrainVictim:
      return pick({"victim"});
    case Stage::kEvaluate:
      return pick({"test_data", "poison", "conditions", "eval_corruption", "stealth_samples", "lpips_module"});
    case Stage::kDefend:
      return pick({"test_data", "defense"});
  }
  return {};
}

// Primary artifact each stage hands downstream.
fs::path primary_output(const ExperimentConfig& cfg, Stage s) {
  switch (s) {
    case Stage::kTrainInjector:
      return stage_dir(cfg, s) / "joint.ckpt";
    case Stage::kPoison:
      return stage_dir(cfg, s) / "poisoned.ckpt";
    case Stage::kTrainVictim:
      return stage_dir(cfg, s) / "victim.ckpt";
    case Stage::kEvaluate:
      return stage_dir(cfg, s) / "eval.json";
    case Stage::kDefend:
      return stage_dir(cfg, s) / "defense.json";
  }
  return {};
}

bool is_bookkeeping(const std::string& name) {
  return name == "manifest.json" || name == "pending.json" || name == "joint_latest.ckpt" ||
         name == "joint_last_good.ckpt";
}

nlohmann::json hash_outputs(const fs::path& dir) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && !is_bookkeeping(e.path().filename().string())) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  nlohmann::json out = nlohmann::json::object();
  for (const auto& n : names) out[n] = sha256_file(dir / n);
  return out;
}

nlohmann::json hash_inputs(const ExperimentConfig& cfg, Stage s) {
  nlohmann::json in = nlohmann::json::object();
  for (Stage d : dependencies(s, cfg)) {
    const auto p = primary_output(cfg, d);
    in[to_string(d) + "/" + p.filename().string()] = sha256_file(p);
  }
  if (s == Stage::kTrainVictim && !cfg.victim.init_weights.empty())
    in["init_weights"] = sha256_file(cfg.victim.init_weights);
  return in;
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, p);
}

std::optional<nlohmann::json> try_read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) return std::nullopt;
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

bool outputs_verify(const fs::path& dir, const nlohmann::json& manifest) {
  if (!manifest.contains("outputs")) return false;
  for (const auto& [name, digest] : manifest.at("outputs").items()) {
    if (!fs::exists(dir / name) || sha256_file(dir / name) != digest.get<std::string>()) return false;
  }
  return true;
}

bool upstream_matches(const ExperimentConfig& cfg, Stage s, const nlohmann::json& manifest) {
  for (Stage d : dependencies(s, cfg)) {
    const auto p = primary_output(cfg, d);
    const std::string key = to_string(d) + "/" + p.filename().string();
    if (!fs::exists(p) || !manifest.at("inputs").contains(key) ||
        manifest.at("inputs").at(key).get<std::string>() != sha256_file(p))
      return false;
  }
  if (s == Stage::kTrainVictim && !cfg.victim.init_weights.empty()) {
    const fs::path p = cfg.victim.init_weights;
    if (!fs::exists(p) || !manifest.at("inputs").contains("init_weights") ||
        manifest.at("inputs").at("init_weights").get<std::string>() != sha256_file(p))
      return false;
  }
  return true;
}

// Per-run lazily loaded datasets and upstream artifacts.
class StageRunner {
 public:
  explicit StageRunner(const ExperimentConfig& cfg) : cfg_(cfg) {}

  void run(Stage s, bool resume) {
    switch (s) {
      case Stage::kTrainInjector:
        return train_injector(resume);
      case Stage::kPoison:
        return poison();
      case Stage::kTrainVictim:
        return train_victim_stage();
      case Stage::kEvaluate:
        return evaluate();
      case Stage::kDefend:
        return defend();
    }
  }

 private:
  const Dataset& train_data() {
    if (!train_) train_ = load_dataset(cfg_.train_data);
    return *train_;
  }
  const Dataset& test_data() {
    if (!test_) test_ = load_dataset(cfg_.test_data);
    return *test_;
  }

  InjectFn trigger_fn() {
    if (cfg_.poison.mode == InjectionMode::kLearnedInjector) {
      auto state = std::make_shared<InjectorState>(
          load_injector(primary_output(cfg_, Stage::kTrainInjector), &cfg_.injector));
      return [state](const torch::Tensor& x) {
        std::vector<torch::Tensor> out;
        for (int64_t s = 0; s < x.size(0); s += 64) out.push_back(inject(*state, x.slice(0, s, std::min(x.size(0), s + 64))));
        return torch::cat(out);
      };
    }
    const auto trig = make_patch_trigger(cfg_.injector.height, cfg_.injector.width);
    return [trig](const torch::Tensor& x) { return blend_inject_alpha(x, trig.pattern, trig.alpha); };
  }

  void train_injector(bool resume) {
    const Dataset& full = train_data();
    const Dataset data = cfg_.injector_train_limit > 0 && cfg_.injector_train_limit < full.size()
                             ? take_subset(full, cfg_.injector_train_limit, derive_seed({cfg_.seed, 0x171}))
                             : full;
    JointTrainOptions opts;
    opts.out_dir = stage_dir(cfg_, Stage::kTrainInjector);
    opts.resume = resume;
    train_joint(data, cfg_.injector, cfg_.extractor, cfg_.anti_collapse, cfg_.loss, cfg_.schedule, opts);
  }

  void poison() {
    const auto dir = stage_dir(cfg_, Stage::kPoison);
    const uint64_t seed = derive_seed({cfg_.seed, 0x9015});
    PoisonedDataset p;
    if (cfg_.poison.mode == InjectionMode::kLearnedInjector) {
      const InjectFn fn = trigger_fn();
      p = build_poisoned_dataset(train_data(), cfg_.poison, &fn, nullptr, seed);
    } else {
      const auto trig = make_patch_trigger(cfg_.injector.height, cfg_.injector.width);
      p = build_poisoned_dataset(train_data(), cfg_.poison, nullptr, &trig, seed);
    }
    save_poisoned_dataset(p, dir / "poisoned.ckpt");
    write_poison_manifest(p, dir / "poison_manifest.json");
  }

  void train_victim_stage() {
    const auto p = load_poisoned_dataset(primary_output(cfg_, Stage::kPoison));
    VictimTrainOptions opts;
    opts.out_dir = stage_dir(cfg_, Stage::kTrainVictim);
    train_victim(p.data, cfg_.victim, opts);
  }

  void evaluate() {
    const auto victim = load_victim(primary_output(cfg_, Stage::kTrainVictim));
    AttackEvalInputs in;
    in.victim = victim.net.get();
    in.clean_test = &test_data();
    in.inject = trigger_fn();
    in.target = cfg_.poison.target_label;
    in.conditions = cfg_.conditions;
    in.params = cfg_.eval_corruption;
    const std::string method =
        cfg_.poison.mode == InjectionMode::kLearnedInjector ? "learned-watermark" : "patch-blend";
    auto report = evaluate_attack(in, method, cfg_.test_data.name);

    const auto stealth_set = take_subset(test_data(), std::min(cfg_.stealth_samples, test_data().size()),
                                         derive_seed({cfg_.seed, 0x57ea}));
    const auto poisoned = in.inject(stealth_set.images);
    auto lpips = make_perceptual_distance(
        cfg_.lpips_module.empty() ? std::nullopt : std::optional<fs::path>(cfg_.lpips_module), cfg_.injector.channels);
    report.stealth = measure_stealth(stealth_set.images, poisoned, *lpips);
    emit_report(report, stage_dir(cfg_, Stage::kEvaluate) / "eval");
  }

  void defend() {
    const auto victim = load_victim(primary_output(cfg_, Stage::kTrainVictim));
    const auto rep = run_neural_cleanse(*victim.net, test_data(), cfg_.defense);
    write_defense_report(rep, stage_dir(cfg_, Stage::kDefend) / "defense.json");
  }

  const ExperimentConfig& cfg_;
  std::optional<Dataset> train_, test_;
};

}  // namespace

std::string stage_config_hash(const ExperimentConfig& cfg, Stage s) { return sha256_hex(stage_config(cfg, s).dump()); }

nlohmann::json read_manifest(const fs::path& stage_directory) {
  auto m = try_read_json(stage_directory / "manifest.json");
  if (!m) throw IoError("no readable manifest in " + stage_directory.string());
  return *m;
}

bool stage_complete(const ExperimentConfig& cfg, Stage s) {
  const auto dir = stage_dir(cfg, s);
  const auto m = try_read_json(dir / "manifest.json");
  return m && m->value("config_hash", std::string()) == stage_config_hash(cfg, s) && upstream_matches(cfg, s, *m) &&
         outputs_verify(dir, *m);
}

std::vector<StageOutcome> run_pipeline(const ExperimentConfig& cfg, const std::vector<Stage>& stages,
                                       const RunOptions& options) {
  const std::set<Stage> requested(stages.begin(), stages.end());
  // Dependency check before any work, so a bad request fails fast.
  for (Stage s : all_stages()) {
    if (!requested.count(s)) continue;
    for (Stage d : dependencies(s, cfg)) {
      if (requested.count(d)) continue;
      if (!fs::exists(primary_output(cfg, d)) || !try_read_json(stage_dir(cfg, d) / "manifest.json"))
        throw DependencyError("stage '" + to_string(s) + "' needs the output of stage '" + to_string(d) + "' (" +
                              primary_output(cfg, d).string() + " is missing); run '" + to_string(d) +
                              "' first or include it in the requested stages");
    }
  }

  StageRunner runner(cfg);
  std::vector<StageOutcome> outcomes;
  for (Stage s : all_stages()) {
    if (!requested.count(s)) continue;
    const auto dir = stage_dir(cfg, s);
    const std::string hash = stage_config_hash(cfg, s);
    if (const auto m = try_read_json(dir / "manifest.json"); m && !options.force) {
      if (m->value("config_hash", std::string()) != hash)
        throw StalenessError("stage '" + to_string(s) + "': configuration changed since " + dir.string() +
                             " was produced (stored hash " + m->value("config_hash", std::string()).substr(0, 12) +
                             ", current " + hash.substr(0, 12) + "); re-run with --force");
      if (!upstream_matches(cfg, s, *m))
        throw StalenessError("stage '" + to_string(s) + "': upstream artifacts changed since " + dir.string() +
                             " was produced; re-run with --force");
      if (outputs_verify(dir, *m)) {
        LM_LOG(kInfo) << "stage " << to_string(s) << ": up to date, skipping";
        outcomes.push_back({s, false});
        continue;
      }
      LM_LOG(kWarn) << "stage " << to_string(s) << ": outputs missing or modified, re-running";
    }

    // A pending marker with the same hash means an interrupted run of this
    // exact configuration; anything else starts from a clean directory.
    const auto pending = try_read_json(dir / "pending.json");
    const bool resume = !options.force && pending && pending->value("config_hash", std::string()) == hash;
    if (!resume) fs::remove_all(dir);
    fs::create_directories(dir);
    write_json(dir / "pending.json", {{"config_hash", hash}});

    LM_LOG(kInfo) << "stage " << to_string(s) << ": running";
    try {
      runner.run(s, resume);
    } catch (const std::exception& e) {
      LM_LOG(kWarn) << "stage " << to_string(s) << " failed: " << e.what();
      throw;
    }
    nlohmann::json manifest = {{"manifest_version", kManifestVersion},
                               {"stage", to_string(s)},
                               {"config_hash", hash},
                               {"seed", cfg.seed},
                               {"config", stage_config(cfg, s)},
                               {"inputs", hash_inputs(cfg, s)},
                               {"outputs", hash_outputs(dir)}};
    write_json(dir / "manifest.json", manifest);
    fs::remove(dir / "pending.json");
    outcomes.push_back({s, true});
  }
  return outcomes;
}

nlohmann::json write_summary_report(const ExperimentConfig& cfg) {
  const auto eval_path = primary_output(cfg, Stage::kEvaluate);
  const auto def_path = primary_output(cfg, Stage::kDefend);
  const bool have_eval = fs::exists(eval_path), have_def = fs::exists(def_path);
  if (!have_eval && !have_def)
    throw DependencyError("report needs the output of stage 'evaluate' or 'defend'; neither exists under " +
                          cfg.output_dir.string());
  nlohmann::json summary = {{"config_hash", cfg.hash()}, {"seed", cfg.seed}, {"profile", to_string(cfg.profile)}};
  std::ostringstream md;
  md << "# latentmark report\n\nprofile: " << to_string(cfg.profile) << ", seed: " << cfg.seed
     << ", config: " << cfg.hash().substr(0, 12) << "\n\n";
  if (have_eval) {
    const auto rep = read_report(eval_path);
    summary["evaluation"] = rep.to_json();
    md << "## Attack\n\n```\n" << report_csv(rep) << "```\n\n";
    if (rep.stealth) {
      md << "## Stealth\n\nPSNR " << rep.stealth->psnr << " dB, SSIM " << rep.stealth->ssim << ", LPIPS "
         << rep.stealth->lpips << " (" << rep.stealth->lpips_backend
         << (rep.stealth->lpips_comparable ? ")" : ", not comparable with published LPIPS)") << "\n\n";
    }
  }
  if (have_def) {
    const auto j = try_read_json(def_path);
    if (!j) throw IntegrityError("unreadable " + def_path.string());
    const auto rep = DefenseReport::from_json(*j);
    summary["defense"] = *j;
    md << "## Neural Cleanse\n\nanomaly index " << rep.model_index << " (class " << rep.flagged_class << ", tau "
       << rep.tau << "): " << (rep.flagged ? "flagged as backdoored" : "not flagged") << "\n";
  }
  write_json(cfg.output_dir / "report.json", summary);
  std::ofstream out(cfg.output_dir / "report.md", std::ios::trunc);
  if (!out) throw IoError("cannot write report.md");
  out << md.str();
  return summary;
}

}  // namespace latentmark
