// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <sstream>

#include "doctest.h"
#include "latentmark/config.hpp"
#include "latentmark/errors.hpp"
#include "latentmark/evaluation.hpp"
#include "latentmark/pipeline.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace latentmark;

namespace {

// Smallest configuration that exercises every stage in seconds.
nlohmann::json tiny_doc(const fs::path& out) {
  return {
      {"output_dir", out.string()},
      {"train_data", {{"synthetic_count", 48}, {"synthetic_classes", 4}, {"synthetic_size", 16}}},
      {"test_data", {{"synthetic_count", 24}, {"synthetic_classes", 4}, {"synthetic_size", 16}}},
      {"injector_train_limit", 16},
      {"injector", {{"embed_dim", 16}, {"encoder_depth", 1}, {"decoder_depth", 1}, {"heads", 2}, {"mlp_ratio", 2}}},
      {"extractor", {{"base_channels", 4}}},
      {"schedule", {{"iterations", 2}, {"batch_size", 4}, {"log_every", 1}, {"checkpoint_every", 1}}},
      {"victim", {{"epochs", 1}, {"batch_size", 16}, {"small_blocks_per_stage", 1}}},
      {"defense", {{"steps", 2}, {"clean_budget", 8}, {"batch_size", 8}}},
      {"stealth_samples", 8},
  };
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("empty document yields the desk defaults") {
  testutil::TempDir tmp;
  std::ofstream(tmp.path() / "empty.json").close();
  ConfigDiagnostics diag;
  const auto cfg = load_config_file(tmp.path() / "empty.json", std::nullopt, &diag);
  CHECK(cfg.profile == Profile::kDesk);
  CHECK(cfg.loss.lambda1 == 1.0);
  CHECK(cfg.loss.lambda2 == 0.1);
  CHECK(cfg.loss.epsilon == doctest::Approx(1.0 / 255));
  CHECK(cfg.poison.ratio == 0.1);
  CHECK(cfg.injector.encoder_depth == 6);
  CHECK(cfg.injector.decoder_depth == 2);
  CHECK(cfg.injector.embed_dim == 192);
  CHECK(cfg.victim.architecture == Architecture::kSmallResNet);
  CHECK(cfg.victim.epochs == 30);
  CHECK(cfg.defense.tau == 2.0);
  CHECK(cfg.schedule.cosine_decay);
  CHECK_FALSE(diag.defaults_applied.empty());
  CHECK(cfg.hash() == validate_config(nlohmann::json::object()).hash());
}

TEST_CASE("paper profile") {
  const auto cfg = validate_config({{"profile", "paper"}});
  CHECK(cfg.injector.encoder_depth == 24);
  CHECK(cfg.injector.decoder_depth == 8);
  CHECK(cfg.victim.architecture == Architecture::kResNet18);
  CHECK(cfg.victim.epochs == 100);
  CHECK(cfg.schedule.iterations == 10000);
  CHECK(cfg.schedule.optimizer.kind == OptimizerKind::kSgd);
  CHECK(cfg.schedule.optimizer.lr == doctest::Approx(2e-4));
  CHECK_FALSE(cfg.schedule.cosine_decay);
  CHECK(cfg.train_data.name == "cifar10");
}

TEST_CASE("invalid values and unknown keys are reported together") {
  CHECK_THROWS_WITH_AS(validate_config({{"poison", {{"ratio", 1.5}}}}), doctest::Contains("ratio out of [0,1]"),
                       ConfigError);
  try {
    validate_config({{"poison", {{"ratio", 1.5}}}, {"victim", {{"epochs", 0}}}, {"bogus", 1}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("poison") != std::string::npos);
    CHECK(msg.find("victim") != std::string::npos);
    CHECK(msg.find("bogus: unknown key") != std::string::npos);
  }
  CHECK_THROWS_WITH_AS(validate_config({{"victim", {{"seed", 3}}}}), doctest::Contains("top-level seed"), ConfigError);
  CHECK_THROWS_WITH_AS(validate_config({{"poison", {{"target_label", 10}}}}), doctest::Contains("target_label"),
                       ConfigError);
  testutil::TempDir tmp;
  std::ofstream(tmp.path() / "bad.json") << "{ not json";
  CHECK_THROWS_AS(load_config_file(tmp.path() / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_config_file(tmp.path() / "absent.json"), IoError);
}

TEST_CASE("config serialization round-trips and hashes stably") {
  const auto a = validate_config({{"seed", 7}, {"poison", {{"ratio", 0.2}}}});
  nlohmann::json doc = a.to_json();
  // Seeds are derived, so they cannot be fed back in.
  for (const char* k : {"train_data", "test_data", "schedule", "anti_collapse", "victim", "defense"}) doc[k].erase("seed");
  const auto b = validate_config(doc);
  CHECK(a.hash() == b.hash());
  CHECK(a.to_json() == b.to_json());
  auto c = a;
  c.output_dir = "elsewhere";
  CHECK(c.hash() == a.hash());
  CHECK(validate_config({{"seed", 8}}).hash() != validate_config({{"seed", 7}}).hash());
  CHECK(a.victim.seed != validate_config({{"seed", 8}}).victim.seed);
}

TEST_CASE("stage dependencies") {
  auto cfg = validate_config({});
  CHECK(dependencies(Stage::kTrainInjector, cfg).empty());
  CHECK((dependencies(Stage::kPoison, cfg) == std::vector<Stage>{Stage::kTrainInjector}));
  cfg.poison.mode = InjectionMode::kLinearBlend;
  CHECK(dependencies(Stage::kPoison, cfg).empty());
  CHECK(parse_stage("train-victim") == Stage::kTrainVictim);
  CHECK_THROWS_AS(parse_stage("deploy"), ConfigError);
}

TEST_CASE("missing upstream output raises DependencyError naming the stage") {
  testutil::TempDir tmp;
  const auto cfg = validate_config(tiny_doc(tmp.path()));
  CHECK_THROWS_WITH_AS(run_pipeline(cfg, {Stage::kTrainVictim}), doctest::Contains("poison"), DependencyError);
  CHECK_THROWS_AS(write_summary_report(cfg), DependencyError);
}

TEST_CASE("full tiny pipeline: manifests, idempotency, staleness, reproducibility") {
  testutil::TempDir a_dir, b_dir;
  const auto cfg = validate_config(tiny_doc(a_dir.path()));
  const auto outcomes = run_pipeline(cfg, all_stages());
  REQUIRE(outcomes.size() == 5);
  for (const auto& o : outcomes) CHECK(o.ran);
  for (Stage s : all_stages()) {
    CHECK(stage_complete(cfg, s));
    const auto m = read_manifest(stage_dir(cfg, s));
    CHECK(m.at("stage") == to_string(s));
    CHECK(m.at("config_hash") == stage_config_hash(cfg, s));
    CHECK(m.at("seed") == cfg.seed);
    CHECK_FALSE(m.at("outputs").empty());
    CHECK_FALSE(fs::exists(stage_dir(cfg, s) / "pending.json"));
  }
  CHECK(read_manifest(stage_dir(cfg, Stage::kPoison)).at("inputs").contains("train-injector/joint.ckpt"));

  SUBCASE("second run skips everything") {
    for (const auto& o : run_pipeline(cfg, all_stages())) CHECK_FALSE(o.ran);
  }
  SUBCASE("a changed stage config is stale until forced") {
    auto changed = cfg;
    changed.victim.epochs = 2;
    CHECK_THROWS_AS(run_pipeline(changed, {Stage::kTrainVictim}), StalenessError);
    CHECK(run_pipeline(changed, {Stage::kTrainVictim}, {true}).at(0).ran);
    // downstream now disagrees with the new upstream artifact
    CHECK_THROWS_AS(run_pipeline(changed, {Stage::kEvaluate}), StalenessError);
    CHECK_FALSE(stage_complete(changed, Stage::kEvaluate));
  }
  SUBCASE("tampered outputs are regenerated") {
    std::ofstream(stage_dir(cfg, Stage::kEvaluate) / "eval.json", std::ios::app) << " ";
    CHECK(run_pipeline(cfg, {Stage::kEvaluate}).at(0).ran);
  }
  SUBCASE("identical config elsewhere, stages listed in reverse: identical manifests and report") {
    auto other = cfg;
    other.output_dir = b_dir.path();
    auto reversed = all_stages();
    std::reverse(reversed.begin(), reversed.end());
    run_pipeline(other, reversed);
    for (Stage s : all_stages()) CHECK(read_manifest(stage_dir(cfg, s)) == read_manifest(stage_dir(other, s)));
    CHECK(write_summary_report(cfg) == write_summary_report(other));
    CHECK(slurp(cfg.output_dir / "report.md") == slurp(other.output_dir / "report.md"));
  }
}

TEST_CASE("linear-blend pipeline runs without the injector stage") {
  testutil::TempDir tmp;
  auto doc = tiny_doc(tmp.path());
  doc["poison"] = {{"mode", "LINEAR_BLEND"}};
  const auto cfg = validate_config(doc);
  const auto out = run_pipeline(cfg, {Stage::kPoison, Stage::kTrainVictim, Stage::kEvaluate});
  CHECK(out.size() == 3);
  CHECK_FALSE(fs::exists(stage_dir(cfg, Stage::kTrainInjector)));
  const auto rep = read_report(stage_dir(cfg, Stage::kEvaluate) / "eval.json");
  CHECK(rep.cda.size() == 5);
}
