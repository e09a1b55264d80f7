// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include "latentmark/optim.hpp"

#include <sstream>

#include "latentmark/errors.hpp"

namespace latentmark {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::kAdam ? "ADAM" : "SGD"; }

OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "SGD" || s == "sgd") return OptimizerKind::kSgd;
  if (s == "ADAM" || s == "adam" || s == "Adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + s + "' (expected SGD|ADAM)");
}

void OptimizerSpec::validate(const std::string& where) const {
  if (!(lr > 0.0)) throw ConfigError(where + ": lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError(where + ": momentum must be in [0,1)");
  if (!(weight_decay >= 0.0)) throw ConfigError(where + ": weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError(where + ": Adam betas must be in [0,1)");
}

nlohmann::json OptimizerSpec::to_json() const {
  nlohmann::json j = {{"kind", to_string(kind)}, {"lr", lr}, {"weight_decay", weight_decay}};
  if (kind == OptimizerKind::kSgd) {
    j["momentum"] = momentum;
  } else {
    j["beta1"] = beta1;
    j["beta2"] = beta2;
  }
  return j;
}

bool OptimizerSpec::operator==(const OptimizerSpec& o) const {
  if (kind != o.kind || lr != o.lr || weight_decay != o.weight_decay) return false;
  return kind == OptimizerKind::kSgd ? momentum == o.momentum : beta1 == o.beta1 && beta2 == o.beta2;
}

OptimizerSpec OptimizerSpec::from_json(const nlohmann::json& j) {
  OptimizerSpec o;
  o.kind = parse_optimizer_kind(j.value("kind", std::string("SGD")));
  o.lr = j.value("lr", o.lr);
  o.momentum = j.value("momentum", o.momentum);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  o.beta1 = j.value("beta1", o.beta1);
  o.beta2 = j.value("beta2", o.beta2);
  return o;
}

std::unique_ptr<torch::optim::Optimizer> OptimizerSpec::make(const std::vector<torch::Tensor>& params) const {
  if (kind == OptimizerKind::kAdam) {
    return std::make_unique<torch::optim::Adam>(
        params, torch::optim::AdamOptions(lr).betas({beta1, beta2}).weight_decay(weight_decay));
  }
  return std::make_unique<torch::optim::SGD>(params,
                                             torch::optim::SGDOptions(lr).momentum(momentum).weight_decay(weight_decay));
}

void set_learning_rate(torch::optim::Optimizer& opt, double lr) {
  for (auto& group : opt.param_groups()) group.options().set_lr(lr);
}

std::string serialize_optimizer(const torch::optim::Optimizer& opt) {
  torch::serialize::OutputArchive archive;
  opt.save(archive);
  std::ostringstream os;
  archive.save_to(os);
  return os.str();
}

void deserialize_optimizer(torch::optim::Optimizer& opt, const std::string& bytes) {
  std::istringstream is(bytes);
  torch::serialize::InputArchive archive;
  archive.load_from(is);
  opt.load(archive);
}

}  // namespace latentmark
