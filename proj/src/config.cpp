// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include "latentmark/config.hpp"

#include <fstream>
#include <sstream>

#include "latentmark/errors.hpp"
#include "latentmark/hashing.hpp"
#include "latentmark/log.hpp"
#include "latentmark/rng.hpp"

namespace latentmark {

std::string to_string(Profile p) { return p == Profile::kPaper ? "paper" : "desk"; }

Profile parse_profile(const std::string& s) {
  if (s == "desk") return Profile::kDesk;
  if (s == "paper") return Profile::kPaper;
  throw ConfigError("unknown profile '" + s + "' (expected desk|paper)");
}

namespace {

// Keys for seed derivation; fixed forever so seeds stay stable across versions.
enum SeedKey : uint64_t {
  kSeedTrainData = 1,
  kSeedTestData = 2,
  kSeedSchedule = 3,
  kSeedAntiCollapse = 4,
  kSeedVictim = 5,
  kSeedDefense = 6,
};

nlohmann::json corruption_to_json(const EvalCorruptionParams& p) {
  return {{"mask_fraction", p.mask_fraction}, {"max_angle_deg", p.max_angle_deg}, {"noise_sigma", p.noise_sigma},
          {"scale_min", p.scale_min},         {"scale_max", p.scale_max},         {"seed", p.seed}};
}

EvalCorruptionParams corruption_from_json(const nlohmann::json& j) {
  EvalCorruptionParams p;
  p.mask_fraction = j.at("mask_fraction").get<double>();
  p.max_angle_deg = j.at("max_angle_deg").get<double>();
  p.noise_sigma = j.at("noise_sigma").get<double>();
  p.scale_min = j.at("scale_min").get<double>();
  p.scale_max = j.at("scale_max").get<double>();
  p.seed = j.at("seed").get<uint64_t>();
  return p;
}

void validate_corruption(const EvalCorruptionParams& p) {
  if (!(p.mask_fraction > 0.0 && p.mask_fraction < 1.0)) throw ConfigError("mask_fraction must be in (0,1)");
  if (!(p.max_angle_deg >= 0.0 && p.max_angle_deg <= 180.0)) throw ConfigError("max_angle_deg must be in [0,180]");
  if (!(p.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (!(p.scale_min >= 0.5 && p.scale_max <= 2.0 && p.scale_min <= p.scale_max))
    throw ConfigError("scale range must lie within [0.5, 2.0]");
}

// Component seed fields are derived, never configured.
void strip_seeds(nlohmann::json& doc) {
  for (const char* k : {"train_data", "test_data", "schedule", "anti_collapse", "victim", "defense"}) doc[k].erase("seed");
}

int64_t native_size(const DatasetSpec& d) {
  if (d.name == "synthetic") return d.synthetic_size;
  if (d.name == "gtsrb") return d.gtsrb_size;
  if (d.name == "imagenet-subset") return d.imagenet_size;
  return 32;
}

void collect_defaults(const nlohmann::json& defaults, const nlohmann::json& raw, const std::string& path,
                      std::vector<std::string>& out) {
  for (const auto& [key, value] : defaults.items()) {
    const std::string p = path.empty() ? key : path + "." + key;
    if (!raw.is_object() || !raw.contains(key)) {
      if (value.is_object()) {
        collect_defaults(value, nlohmann::json::object(), p, out);
      } else {
        out.push_back(p + " = " + value.dump());
      }
    } else if (value.is_object()) {
      collect_defaults(value, raw.at(key), p, out);
    }
  }
}

void collect_unknown(const nlohmann::json& defaults, const nlohmann::json& raw, const std::string& path,
                     std::vector<std::string>& errors) {
  if (!raw.is_object()) {
    if (defaults.is_object()) errors.push_back((path.empty() ? "<root>" : path) + ": expected an object");
    return;
  }
  for (const auto& [key, value] : raw.items()) {
    const std::string p = path.empty() ? key : path + "." + key;
    if (!defaults.contains(key)) {
      errors.push_back(p + (key == "seed" ? ": component seeds derive from the top-level seed" : ": unknown key"));
    } else if (defaults.at(key).is_object()) {
      collect_unknown(defaults.at(key), value, p, errors);
    }
  }
}

bool has_path(const nlohmann::json& raw, std::initializer_list<const char*> keys) {
  const nlohmann::json* cur = &raw;
  for (const char* k : keys) {
    if (!cur->is_object() || !cur->contains(k)) return false;
    cur = &cur->at(k);
  }
  return true;
}

}  // namespace

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json conds = nlohmann::json::array();
  for (auto c : conditions) conds.push_back(to_string(c));
  return {{"profile", to_string(profile)},
          {"seed", seed},
          {"output_dir", output_dir.string()},
          {"train_data", train_data.to_json()},
          {"test_data", test_data.to_json()},
          {"injector_train_limit", injector_train_limit},
          {"poison", poison.to_json()},
          {"injector", injector.to_json()},
          {"extractor", extractor.to_json()},
          {"anti_collapse", anti_collapse.to_json()},
          {"loss", loss.to_json()},
          {"schedule", schedule.to_json()},
          {"victim", victim.to_json()},
          {"defense", defense.to_json()},
          {"eval_corruption", corruption_to_json(eval_corruption)},
          {"conditions", conds},
          {"stealth_samples", stealth_samples},
          {"lpips_module", lpips_module}};
}

std::string ExperimentConfig::hash() const {
  auto j = to_json();
  j.erase("output_dir");  // where results go does not change them
  return sha256_hex(j.dump());
}

void apply_global_seed(ExperimentConfig& cfg, uint64_t seed) {
  cfg.seed = seed;
  cfg.train_data.seed = derive_seed({seed, kSeedTrainData});
  cfg.test_data.seed = derive_seed({seed, kSeedTestData});
  cfg.schedule.seed = derive_seed({seed, kSeedSchedule});
  cfg.anti_collapse.seed = derive_seed({seed, kSeedAntiCollapse});
  cfg.victim.seed = derive_seed({seed, kSeedVictim});
  cfg.defense.seed = derive_seed({seed, kSeedDefense});
}

nlohmann::json profile_defaults(Profile p) {
  ExperimentConfig c;
  c.profile = p;
  c.anti_collapse = AntiCollapseSet::standard(0);
  if (p == Profile::kPaper) {
    c.output_dir = "runs/paper";
    c.train_data.name = "cifar10";
    c.train_data.root = "data/cifar10";
    c.test_data = c.train_data;
    c.test_data.split = Split::kTest;
    c.injector_train_limit = 0;
    c.injector = InjectorConfig::paper(3, 32, 32);
    c.schedule.iterations = 10000;
    c.schedule.optimizer = {OptimizerKind::kSgd, 2e-4, 0.5, 0.0};
    c.victim.architecture = Architecture::kResNet18;
    c.victim.epochs = 100;
    c.stealth_samples = 10000;
  } else {
    c.output_dir = "runs/desk";
    c.train_data.name = "synthetic";
    c.train_data.synthetic_count = 10000;
    c.train_data.synthetic_classes = 10;
    c.test_data = c.train_data;
    c.test_data.split = Split::kTest;
    c.test_data.synthetic_count = 2000;
    c.injector_train_limit = 5000;
    c.injector = InjectorConfig::desk(3, 32, 32);
    c.schedule.iterations = 2000;
    c.schedule.optimizer = {OptimizerKind::kAdam, 5e-4, 0.0, 0.0};
    c.schedule.cosine_decay = true;
    c.victim.architecture = Architecture::kSmallResNet;
    c.victim.epochs = 30;
  }
  auto doc = c.to_json();
  strip_seeds(doc);
  doc["anti_collapse"] = nlohmann::json{{"ops", doc["anti_collapse"]["ops"]}};
  return doc;
}

ExperimentConfig validate_config(const nlohmann::json& raw_in, Profile fallback_profile, ConfigDiagnostics* diagnostics) {
  const nlohmann::json raw = raw_in.is_null() ? nlohmann::json::object() : raw_in;
  std::vector<std::string> errors;
  if (!raw.is_object()) throw ConfigError("config: top level must be a JSON object");

  Profile profile = fallback_profile;
  if (raw.contains("profile")) {
    try {
      profile = parse_profile(raw.at("profile").get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(std::string("profile: ") + e.what());
    }
  }
  const auto defaults = profile_defaults(profile);
  collect_unknown(defaults, raw, "", errors);

  std::vector<std::string> filled;
  collect_defaults(defaults, raw, "", filled);
  nlohmann::json doc = defaults;
  doc.merge_patch(raw);
  doc["profile"] = to_string(profile);

  ExperimentConfig cfg;
  cfg.profile = profile;
  // Parse then validate each section, recording "path: reason" without stopping.
  auto section = [&](const char* name, auto&& fn) {
    try {
      fn(doc.at(name));
    } catch (const nlohmann::json::exception& e) {
      errors.push_back(std::string(name) + ": malformed value (" + e.what() + ")");
    } catch (const std::exception& e) {
      errors.push_back(std::string(name) + ": " + e.what());
    }
  };
  section("seed", [&](const nlohmann::json& j) { cfg.seed = j.get<uint64_t>(); });
  section("output_dir", [&](const nlohmann::json& j) { cfg.output_dir = j.get<std::string>(); });
  section("train_data", [&](const nlohmann::json& j) { cfg.train_data = DatasetSpec::from_json(j); });
  section("test_data", [&](const nlohmann::json& j) { cfg.test_data = DatasetSpec::from_json(j); });
  section("injector_train_limit", [&](const nlohmann::json& j) {
    cfg.injector_train_limit = j.get<int64_t>();
    if (cfg.injector_train_limit < 0) throw ConfigError("must be >= 0");
  });
  section("injector", [&](const nlohmann::json& j) {
    cfg.injector = InjectorConfig::from_json(j);
    // Image geometry follows the dataset unless set explicitly.
    const int64_t size = native_size(cfg.train_data);
    if (!has_path(raw, {"injector", "height"})) cfg.injector.height = size;
    if (!has_path(raw, {"injector", "width"})) cfg.injector.width = size;
    if (!has_path(raw, {"injector", "patch_size"})) cfg.injector.patch_size = size >= 224 ? 16 : 4;
    cfg.injector.validate();
  });
  section("extractor", [&](const nlohmann::json& j) {
    cfg.extractor = ExtractorConfig::from_json(j);
    cfg.extractor.validate();
    const int64_t factor = int64_t{1} << cfg.extractor.depth;
    if (cfg.injector.height % factor != 0 || cfg.injector.width % factor != 0)
      throw ConfigError("image size must be divisible by 2^depth = " + std::to_string(factor));
  });
  section("anti_collapse", [&](const nlohmann::json& j) {
    cfg.anti_collapse = AntiCollapseSet::from_json(j);
    cfg.anti_collapse.validate();
  });
  section("loss", [&](const nlohmann::json& j) {
    cfg.loss = JointLossConfig::from_json(j);
    cfg.loss.validate();
  });
  section("schedule", [&](const nlohmann::json& j) {
    cfg.schedule = TrainSchedule::from_json(j);
    cfg.schedule.validate();
  });
  section("victim", [&](const nlohmann::json& j) {
    cfg.victim = VictimConfig::from_json(j);
    cfg.victim.validate();
  });
  section("defense", [&](const nlohmann::json& j) {
    cfg.defense = DefenseConfig::from_json(j);
    cfg.defense.validate();
  });
  section("eval_corruption", [&](const nlohmann::json& j) {
    cfg.eval_corruption = corruption_from_json(j);
    validate_corruption(cfg.eval_corruption);
  });
  section("conditions", [&](const nlohmann::json& j) {
    cfg.conditions.clear();
    for (const auto& c : j) cfg.conditions.push_back(parse_condition(c.get<std::string>()));
    if (cfg.conditions.empty()) throw ConfigError("at least one condition required");
  });
  section("stealth_samples", [&](const nlohmann::json& j) {
    cfg.stealth_samples = j.get<int64_t>();
    if (cfg.stealth_samples < 1) throw ConfigError("must be >= 1");
  });
  section("lpips_module", [&](const nlohmann::json& j) { cfg.lpips_module = j.get<std::string>(); });
  // Poison last: the target range depends on the dataset's class count.
  section("poison", [&](const nlohmann::json& j) {
    cfg.poison = PoisonSpec::from_json(j);
    const int64_t k = cfg.train_data.name == "synthetic" ? cfg.train_data.synthetic_classes
                      : cfg.train_data.name == "cifar10" ? 10
                      : cfg.train_data.name == "gtsrb"   ? 43
                                                         : cfg.train_data.imagenet_classes;
    cfg.poison.validate(k);
  });
  cfg.extractor.in_channels = cfg.injector.channels;

  if (!errors.empty()) {
    std::ostringstream os;
    os << errors.size() << " configuration error(s):";
    for (const auto& e : errors) os << "\n  " << e;
    throw ConfigError(os.str());
  }
  apply_global_seed(cfg, cfg.seed);
  for (const auto& f : filled) LM_LOG(kDebug) << "config default (" << to_string(profile) << "): " << f;
  if (!filled.empty()) {
    LM_LOG(kInfo) << "config: " << filled.size() << " default(s) applied from the " << to_string(profile) << " profile";
  }
  if (diagnostics != nullptr) diagnostics->defaults_applied = std::move(filled);
  return cfg;
}

ExperimentConfig load_config_file(const std::filesystem::path& path, std::optional<Profile> profile_override,
                                  ConfigDiagnostics* diagnostics) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json raw = nlohmann::json::object();
  if (ss.str().find_first_not_of(" \t\r\n") != std::string::npos) {
    try {
      raw = nlohmann::json::parse(ss.str());
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  }
  if (profile_override) raw["profile"] = to_string(*profile_override);
  return validate_config(raw, profile_override.value_or(Profile::kDesk), diagnostics);
}

}  // namespace latentmark
