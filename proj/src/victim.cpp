// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include "latentmark/victim.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "latentmark/checkpoint.hpp"
#include "latentmark/errors.hpp"
#include "latentmark/log.hpp"
#include "latentmark/rng.hpp"

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace latentmark {

std::string to_string(Architecture a) { return a == Architecture::kResNet18 ? "RESNET18" : "SMALL_RESNET"; }

Architecture parse_architecture(const std::string& s) {
  if (s == "SMALL_RESNET") return Architecture::kSmallResNet;
  if (s == "RESNET18") return Architecture::kResNet18;
  throw ConfigError("unknown architecture '" + s + "' (expected SMALL_RESNET|RESNET18)");
}

void VictimConfig::validate() const {
  if (epochs < 1) throw ConfigError("victim: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("victim: batch_size must be >= 1");
  if (small_blocks_per_stage < 1) throw ConfigError("victim: small_blocks_per_stage must be >= 1");
  optimizer.validate("victim.optimizer");
}

nlohmann::json VictimConfig::to_json() const {
  return {{"architecture", to_string(architecture)},
          {"epochs", epochs},
          {"optimizer", optimizer.to_json()},
          {"batch_size", batch_size},
          {"augment", augment},
          {"small_blocks_per_stage", small_blocks_per_stage},
          {"init_weights", init_weights},
          {"seed", seed}};
}

VictimConfig VictimConfig::from_json(const nlohmann::json& j) {
  VictimConfig c;
  if (j.contains("architecture")) c.architecture = parse_architecture(j.at("architecture").get<std::string>());
  c.epochs = j.value("epochs", c.epochs);
  if (j.contains("optimizer")) c.optimizer = OptimizerSpec::from_json(j.at("optimizer"));
  c.batch_size = j.value("batch_size", c.batch_size);
  c.augment = j.value("augment", c.augment);
  c.small_blocks_per_stage = j.value("small_blocks_per_stage", c.small_blocks_per_stage);
  c.init_weights = j.value("init_weights", c.init_weights);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

class BasicBlockImpl : public nn::Module {
 public:
  BasicBlockImpl(int64_t in, int64_t out, int64_t stride) {
    conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
    bn1_ = register_module("bn1", nn::BatchNorm2d(out));
    conv2_ = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1).bias(false)));
    bn2_ = register_module("bn2", nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
      shortcut_ = register_module(
          "shortcut", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
                                     nn::BatchNorm2d(out)));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto h = torch::relu(bn1_(conv1_(x)));
    h = bn2_(conv2_(h));
    return torch::relu(h + (shortcut_ ? shortcut_->forward(x) : x));
  }

 private:
  nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
  nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(BasicBlock);

class ResNetImpl : public ClassifierImpl {
 public:
  ResNetImpl(int64_t channels, int64_t num_classes, const std::vector<int64_t>& widths,
             const std::vector<int64_t>& blocks, bool imagenet_stem) {
    if (imagenet_stem) {
      stem_ = register_module("stem", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(channels, widths[0], 7)
                                                                    .stride(2).padding(3).bias(false)),
                                                     nn::BatchNorm2d(widths[0]), nn::ReLU(),
                                                     nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1))));
    } else {
      stem_ = register_module(
          "stem", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(channels, widths[0], 3).padding(1).bias(false)),
                                 nn::BatchNorm2d(widths[0]), nn::ReLU()));
    }
    stages_ = register_module("stages", nn::Sequential());
    int64_t in = widths[0];
    for (std::size_t s = 0; s < widths.size(); ++s) {
      for (int64_t b = 0; b < blocks[s]; ++b) {
        const int64_t stride = (s > 0 && b == 0) ? 2 : 1;
        stages_->push_back(BasicBlock(in, widths[s], stride));
        in = widths[s];
      }
    }
    head_ = register_module("head", nn::Linear(in, num_classes));
  }

  torch::Tensor forward(const torch::Tensor& x) override {
    auto h = stages_->forward(stem_->forward(x));
    return head_(F::adaptive_avg_pool2d(h, F::AdaptiveAvgPool2dFuncOptions(1)).flatten(1));
  }

 private:
  nn::Sequential stem_{nullptr};
  nn::Sequential stages_{nullptr};
  nn::Linear head_{nullptr};
};

}  // namespace

Classifier make_small_resnet(int64_t channels, int64_t num_classes, int64_t blocks_per_stage) {
  return std::make_shared<ResNetImpl>(channels, num_classes, std::vector<int64_t>{16, 32, 64},
                                      std::vector<int64_t>(3, blocks_per_stage), false);
}

Classifier make_resnet18(int64_t channels, int64_t num_classes, int64_t height) {
  return std::make_shared<ResNetImpl>(channels, num_classes, std::vector<int64_t>{64, 128, 256, 512},
                                      std::vector<int64_t>{2, 2, 2, 2}, height >= 64);
}

VictimState VictimState::create(const VictimConfig& cfg, int64_t channels, int64_t height, int64_t width,
                                int64_t num_classes) {
  cfg.validate();
  if (num_classes < 2) throw ConfigError("victim: need at least 2 classes");
  VictimState s;
  s.config = cfg;
  s.num_classes = num_classes;
  s.channels = channels;
  s.height = height;
  s.width = width;
  torch::manual_seed(derive_seed({cfg.seed, 0x71c7}));
  s.net = cfg.architecture == Architecture::kResNet18 ? make_resnet18(channels, num_classes, height)
                                                      : make_small_resnet(channels, num_classes, cfg.small_blocks_per_stage);
  return s;
}

double cosine_lr(double lr0, int64_t epoch, int64_t epochs) {
  return lr0 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(epochs))) / 2.0;
}

std::vector<int64_t> victim_batch_order(int64_t n, uint64_t seed, int64_t epoch) {
  std::vector<int64_t> order(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(derive_seed({seed, 0x0bde, static_cast<uint64_t>(epoch)}));
  shuffle(order.begin(), order.end(), rng);
  return order;
}

namespace {

// Random crop from a 4-pixel zero-padded copy plus a coin-flip mirror; the
// draw for each image depends on (seed, epoch, dataset index).
torch::Tensor augment_batch(const torch::Tensor& x, const std::vector<int64_t>& indices, uint64_t seed, int64_t epoch) {
  constexpr int64_t kPad = 4;
  const int64_t h = x.size(2), w = x.size(3);
  auto padded = F::pad(x, F::PadFuncOptions({kPad, kPad, kPad, kPad}));
  std::vector<torch::Tensor> out;
  out.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::mt19937_64 rng(derive_seed({seed, 0xa09, static_cast<uint64_t>(epoch), static_cast<uint64_t>(indices[i])}));
    const auto dy = static_cast<int64_t>(uniform_index(rng, 2 * kPad + 1));
    const auto dx = static_cast<int64_t>(uniform_index(rng, 2 * kPad + 1));
    auto img = padded[static_cast<int64_t>(i)].slice(1, dy, dy + h).slice(2, dx, dx + w);
    if (uniform01(rng) < 0.5) img = img.flip({2});
    out.push_back(img);
  }
  return torch::stack(out);
}

void load_matching_weights(ClassifierImpl& net, const VictimConfig& cfg) {
  const auto src = load_victim(cfg.init_weights);
  if (src.config.architecture != cfg.architecture)
    throw ConfigError("victim.init_weights: checkpoint holds " + to_string(src.config.architecture) + ", config asks for " +
                      to_string(cfg.architecture));
  torch::NoGradGuard no_grad;
  auto from = src.net->named_parameters();
  for (const auto& b : src.net->named_buffers()) from.insert(b.key(), b.value());
  int64_t copied = 0, skipped = 0;
  auto copy = [&](const std::string& name, torch::Tensor& dst) {
    const auto* s = from.find(name);
    if (s != nullptr && s->sizes() == dst.sizes()) {
      dst.copy_(*s);
      ++copied;
    } else {
      ++skipped;
    }
  };
  for (auto& p : net.named_parameters()) copy(p.key(), p.value());
  for (auto& b : net.named_buffers()) copy(b.key(), b.value());
  LM_LOG(kInfo) << "victim init from " << cfg.init_weights << ": " << copied << " tensors copied, " << skipped
                << " left at random init";
}

}  // namespace

VictimResult train_victim(const Dataset& train, const VictimConfig& cfg, const VictimTrainOptions& options) {
  train.check_invariants();
  if (train.size() == 0) throw ConfigError("train_victim: dataset is empty");
  VictimResult result;
  result.state = VictimState::create(cfg, train.channels(), train.height(), train.width(), train.num_classes);
  auto& net = *result.state.net;
  if (!cfg.init_weights.empty()) load_matching_weights(net, cfg);
  auto optimizer = cfg.optimizer.make(net.parameters());

  std::filesystem::path metrics_path;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    metrics_path = *options.out_dir / "victim_metrics.jsonl";
    std::ofstream(metrics_path, std::ios::trunc);
  }

  const torch::Tensor images = train.images.to(torch::kFloat32);
  const int64_t n = train.size();
  double first_loss = 0.0;
  int64_t diverged_epochs = 0, batches_run = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(cfg.optimizer.lr, epoch, cfg.epochs);
    set_learning_rate(*optimizer, lr);
    net.train();
    const auto order = victim_batch_order(n, cfg.seed, epoch);
    double loss_sum = 0.0;
    int64_t correct = 0, seen = 0;
    for (int64_t b = 0, start = 0; start < n; ++b, start += cfg.batch_size) {
      const std::vector<int64_t> idx(order.begin() + start, order.begin() + std::min(n, start + cfg.batch_size));
      const auto index = torch::tensor(idx, torch::kInt64);
      torch::Tensor x = images.index_select(0, index);
      if (cfg.augment) x = augment_batch(x, idx, cfg.seed, epoch);
      const torch::Tensor y = train.labels.index_select(0, index);
      const torch::Tensor logits = net.forward(x);
      if (options.on_batch) options.on_batch(epoch, b, logits.detach());
      const torch::Tensor loss = F::cross_entropy(logits, y);
      const double lv = loss.item<double>();
      if (!std::isfinite(lv))
        throw NumericError("victim training: non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(b) + " (lr " + std::to_string(lr) + ")");
      optimizer->zero_grad();
      loss.backward();
      optimizer->step();
      loss_sum += lv * static_cast<double>(idx.size());
      correct += logits.argmax(1).eq(y).sum().item<int64_t>();
      seen += static_cast<int64_t>(idx.size());
      if (options.max_batches > 0 && ++batches_run >= options.max_batches) break;
    }
    VictimEpochRecord rec{epoch, lr, loss_sum / static_cast<double>(seen),
                          100.0 * static_cast<double>(correct) / static_cast<double>(seen)};
    result.history.push_back(rec);
    LM_LOG(kInfo) << "victim epoch " << epoch << " lr=" << lr << " loss=" << rec.loss << " acc=" << rec.accuracy;
    if (options.out_dir) std::ofstream(metrics_path, std::ios::app) << rec.to_json().dump() << '\n';

    if (epoch == 0) first_loss = rec.loss;
    diverged_epochs = rec.loss > 10.0 * first_loss ? diverged_epochs + 1 : 0;
    if (diverged_epochs >= 3)
      throw NumericError("victim training diverged: epoch loss " + std::to_string(rec.loss) +
                         " > 10x initial loss " + std::to_string(first_loss) + " for 3 epochs (lr " +
                         std::to_string(lr) + ")");
    if (options.max_batches > 0 && batches_run >= options.max_batches) break;
  }
  net.eval();
  if (options.out_dir) save_victim(result.state, *options.out_dir / "victim.ckpt");
  return result;
}

torch::Tensor predict(ClassifierImpl& net, const torch::Tensor& x, int64_t batch_size) {
  if (x.dim() != 4) throw ShapeError("predict expects an (N,C,H,W) batch, got " + c10::str(x.sizes()));
  torch::NoGradGuard no_grad;
  const bool was_training = net.is_training();
  net.eval();
  std::vector<torch::Tensor> out;
  for (int64_t s = 0; s < x.size(0); s += batch_size)
    out.push_back(net.forward(x.slice(0, s, std::min(x.size(0), s + batch_size)).to(torch::kFloat32)).argmax(1));
  if (was_training) net.train();
  return out.empty() ? torch::empty({0}, torch::kInt64) : torch::cat(out);
}

torch::Tensor predict(const VictimState& victim, const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != victim.channels || x.size(2) != victim.height || x.size(3) != victim.width)
    throw ShapeError("predict: victim trained on (" + std::to_string(victim.channels) + "," +
                     std::to_string(victim.height) + "," + std::to_string(victim.width) + ") inputs, got " +
                     c10::str(x.sizes()));
  return predict(*victim.net, x);
}

void save_victim(const VictimState& state, const std::filesystem::path& path) {
  CheckpointWriter w("victim");
  w.meta() = {{"config", state.config.to_json()},
              {"num_classes", state.num_classes},
              {"input", {state.channels, state.height, state.width}}};
  w.add_module("net.", *state.net);
  w.write(path);
}

VictimState load_victim(const std::filesystem::path& path) {
  const auto r = CheckpointReader::open(path);
  r.expect_kind("victim");
  const auto& meta = r.meta();
  const auto& in = meta.at("input");
  auto s = VictimState::create(VictimConfig::from_json(meta.at("config")), in.at(0).get<int64_t>(),
                               in.at(1).get<int64_t>(), in.at(2).get<int64_t>(), meta.at("num_classes").get<int64_t>());
  r.load_module("net.", *s.net);
  s.net->eval();
  return s;
}

}  // namespace latentmark
