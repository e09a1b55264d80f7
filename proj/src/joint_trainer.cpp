// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include "latentmark/joint_trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "latentmark/checkpoint.hpp"
#include "latentmark/errors.hpp"
#include "latentmark/log.hpp"
#include "latentmark/rng.hpp"

namespace latentmark {

void JointLossConfig::validate() const {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw ConfigError("loss: lambda1 and lambda2 must be >= 0");
  if (!(epsilon >= 0.0)) throw ConfigError("loss: epsilon must be >= 0");
}

nlohmann::json JointLossConfig::to_json() const {
  return {{"lambda1", lambda1}, {"lambda2", lambda2}, {"epsilon", epsilon}};
}

JointLossConfig JointLossConfig::from_json(const nlohmann::json& j) {
  JointLossConfig c;
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.epsilon = j.value("epsilon", c.epsilon);
  return c;
}

void TrainSchedule::validate() const {
  if (iterations <= 0) throw ConfigError("schedule: iterations must be > 0");
  if (batch_size < 1) throw ConfigError("schedule: batch_size must be >= 1");
  if (log_every < 1 || checkpoint_every < 1) throw ConfigError("schedule: log_every/checkpoint_every must be >= 1");
  optimizer.validate("schedule.optimizer");
}

nlohmann::json TrainSchedule::to_json() const {
  return {{"iterations", iterations}, {"optimizer", optimizer.to_json()}, {"batch_size", batch_size},
          {"seed", seed},             {"log_every", log_every},            {"checkpoint_every", checkpoint_every},
          {"cosine_decay", cosine_decay}};
}

double TrainSchedule::learning_rate(int64_t step) const {
  if (!cosine_decay) return optimizer.lr;
  return optimizer.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(iterations)));
}

TrainSchedule TrainSchedule::from_json(const nlohmann::json& j) {
  TrainSchedule s;
  s.iterations = j.value("iterations", s.iterations);
  if (j.contains("optimizer")) s.optimizer = OptimizerSpec::from_json(j.at("optimizer"));
  s.batch_size = j.value("batch_size", s.batch_size);
  s.seed = j.value("seed", s.seed);
  s.log_every = j.value("log_every", s.log_every);
  s.checkpoint_every = j.value("checkpoint_every", s.checkpoint_every);
  s.cosine_decay = j.value("cosine_decay", s.cosine_decay);
  return s;
}

double total_loss(double l1, double l2, const JointLossConfig& cfg) {
  if (!(l1 >= 0.0) || !(l2 >= 0.0) || !std::isfinite(l1) || !std::isfinite(l2))
    throw ContractError("total_loss: loss terms must be finite and >= 0 (got " + std::to_string(l1) + ", " +
                        std::to_string(l2) + ")");
  return cfg.lambda1 * l1 + cfg.lambda2 * l2;
}

torch::Tensor total_loss(const torch::Tensor& l1, const torch::Tensor& l2, const JointLossConfig& cfg) {
  const double a = l1.item<double>(), b = l2.item<double>();
  if (!(a >= 0.0) || !(b >= 0.0) || !std::isfinite(a) || !std::isfinite(b))
    throw ContractError("total_loss: loss terms must be finite and >= 0");
  return cfg.lambda1 * l1 + cfg.lambda2 * l2;
}

JointState JointState::create(const InjectorConfig& icfg, const ExtractorConfig& ecfg, uint64_t seed) {
  JointState s;
  s.injector = InjectorState::create(icfg, seed);
  s.extractor_config = ecfg;
  s.extractor = TriggerExtractor(ecfg, derive_seed({seed, 0xe7}));
  return s;
}

void save_joint(const JointState& state, const std::filesystem::path& path, const torch::optim::Optimizer* optimizer) {
  CheckpointWriter w("joint");
  w.meta() = {{"injector_config", state.injector.config.to_json()},
              {"extractor_config", state.extractor_config.to_json()},
              {"step", state.injector.step},
              {"seed", state.injector.seed}};
  w.add_module("injector.", *state.injector.net);
  w.add_module("extractor.", *state.extractor);
  if (optimizer != nullptr) w.add_blob("optimizer", serialize_optimizer(*optimizer));
  w.write(path);
}

JointState load_joint(const std::filesystem::path& path, torch::optim::Optimizer* optimizer) {
  const auto r = CheckpointReader::open(path);
  r.expect_kind("joint");
  const auto& meta = r.meta();
  auto state = JointState::create(InjectorConfig::from_json(meta.at("injector_config")),
                                  ExtractorConfig::from_json(meta.at("extractor_config")),
                                  meta.at("seed").get<uint64_t>());
  state.injector.step = meta.at("step").get<int64_t>();
  r.load_module("injector.", *state.injector.net);
  r.load_module("extractor.", *state.extractor);
  if (optimizer != nullptr && r.has_blob("optimizer")) deserialize_optimizer(*optimizer, r.blob("optimizer"));
  return state;
}

std::vector<int64_t> batch_indices(int64_t dataset_size, int64_t batch_size, uint64_t seed, int64_t step) {
  std::vector<int64_t> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  int64_t cached_epoch = -1;
  std::vector<int64_t> perm;
  for (int64_t k = 0; k < batch_size; ++k) {
    const int64_t pos = step * batch_size + k;
    const int64_t epoch = pos / dataset_size;
    if (epoch != cached_epoch) {
      perm.resize(static_cast<std::size_t>(dataset_size));
      for (int64_t i = 0; i < dataset_size; ++i) perm[static_cast<std::size_t>(i)] = i;
      std::mt19937_64 rng(derive_seed({seed, 0xba7c, static_cast<uint64_t>(epoch)}));
      shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<std::size_t>(pos % dataset_size)]);
  }
  return out;
}

namespace {

std::vector<torch::Tensor> all_parameters(JointState& s) {
  auto params = s.injector.net->parameters();
  for (auto& p : s.extractor->parameters()) params.push_back(p);
  return params;
}

void rewrite_log_prefix(const std::filesystem::path& path, int64_t before_step) {
  std::vector<std::string> kept;
  if (std::ifstream in(path); in) {
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      if (nlohmann::json::parse(line).at("step").get<int64_t>() < before_step) kept.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& l : kept) out << l << '\n';
}

}  // namespace

JointResult train_joint(const Dataset& data, const InjectorConfig& icfg, const ExtractorConfig& ecfg,
                        const AntiCollapseSet& anti, const JointLossConfig& loss_cfg, const TrainSchedule& schedule,
                        const JointTrainOptions& options) {
  if (data.size() == 0) throw ConfigError("train_joint: dataset is empty");
  icfg.validate();
  ecfg.validate();
  anti.validate();
  loss_cfg.validate();
  schedule.validate();
  if (data.channels() != icfg.channels || data.height() != icfg.height || data.width() != icfg.width)
    throw ShapeError("train_joint: dataset images " + c10::str(data.images.sizes()) + " do not match injector config");
  if (data.size() < schedule.batch_size) {
    LM_LOG(kWarn) << "dataset (" << data.size() << ") smaller than batch (" << schedule.batch_size
                  << "); sampling wraps around";
  }

  JointResult result;
  result.state = JointState::create(icfg, ecfg, schedule.seed);
  auto optimizer = schedule.optimizer.make(all_parameters(result.state));

  std::filesystem::path log_path, latest_path;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    log_path = *options.out_dir / "joint_log.jsonl";
    latest_path = *options.out_dir / "joint_latest.ckpt";
  }
  int64_t start = 0;
  if (options.resume && options.out_dir && std::filesystem::exists(latest_path)) {
    result.state = load_joint(latest_path);
    optimizer = schedule.optimizer.make(all_parameters(result.state));
    const auto r = CheckpointReader::open(latest_path);
    if (r.has_blob("optimizer")) deserialize_optimizer(*optimizer, r.blob("optimizer"));
    start = result.state.injector.step;
    LM_LOG(kInfo) << "resuming joint training at step " << start;
  }
  if (options.out_dir) rewrite_log_prefix(log_path, start);

  auto& inj = result.state.injector.net;
  auto& ext = result.state.extractor;
  inj->train();
  ext->train();
  const torch::Tensor images = data.images.to(torch::kFloat32);

  for (int64_t step = start; step < schedule.iterations; ++step) {
    const auto idx = batch_indices(data.size(), schedule.batch_size, schedule.seed, step);
    const torch::Tensor x = images.index_select(0, torch::tensor(idx, torch::kInt64));

    const torch::Tensor xp = inj->forward(x);
    const torch::Tensor l1 = injector_loss(x, xp, loss_cfg.epsilon);
    const torch::Tensor xc = apply_set(anti, xp, step);
    const torch::Tensor l2 = extractor_loss(ext->forward(xc), ext->forward(x), inj->watermark());
    const torch::Tensor loss = loss_cfg.lambda1 * l1 + loss_cfg.lambda2 * l2;

    JointLogRecord rec{step, l1.item<double>(), l2.item<double>(), loss.item<double>()};
    if (!std::isfinite(rec.loss)) {
      if (options.out_dir) save_joint(result.state, *options.out_dir / "joint_last_good.ckpt", optimizer.get());
      throw NumericError("joint training: non-finite loss at step " + std::to_string(step) +
                         (options.out_dir ? " (last good state saved to joint_last_good.ckpt)" : ""));
    }
    optimizer->zero_grad();
    loss.backward();
    if (schedule.cosine_decay) set_learning_rate(*optimizer, schedule.learning_rate(step));
    optimizer->step();
    inj->clamp_watermark();
    result.state.injector.step = step + 1;
    result.history.push_back(rec);

    const bool last = step + 1 == schedule.iterations;
    if (step % schedule.log_every == 0 || last) {
      LM_LOG(kInfo) << "joint step " << step << " L1=" << rec.l1 << " L2=" << rec.l2 << " L=" << rec.loss;
      if (options.on_log) options.on_log(rec);
      if (options.out_dir) {
        std::ofstream out(log_path, std::ios::app);
        out << rec.to_json().dump() << '\n';
      }
    }
    if (options.out_dir && ((step + 1) % schedule.checkpoint_every == 0 || last))
      save_joint(result.state, latest_path, optimizer.get());
  }
  inj->eval();
  ext->eval();
  if (options.out_dir) save_joint(result.state, *options.out_dir / "joint.ckpt");
  return result;
}

}  // namespace latentmark
