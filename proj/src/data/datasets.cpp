// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "latentmark/data.hpp"
#include "latentmark/errors.hpp"
#include "latentmark/rng.hpp"

namespace fs = std::filesystem;

namespace latentmark {

LabeledExample Dataset::example(int64_t i) const {
  if (i < 0 || i >= size()) throw std::out_of_range("dataset index " + std::to_string(i));
  return {images[i], labels[i].item<int64_t>()};
}

void Dataset::check_invariants() const {
  if (!images.defined() || images.dim() != 4) throw IngestionError(name + ": images must be (N,C,H,W)");
  if (labels.size(0) != images.size(0)) throw IngestionError(name + ": label count differs from image count");
  if (images.numel() > 0) {
    if (images.min().item<float>() < 0.0f || images.max().item<float>() > 1.0f)
      throw IngestionError(name + ": pixel values outside [0,1]");
    if (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= num_classes)
      throw IngestionError(name + ": label outside [0, num_classes)");
  }
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + s + "' (expected train|test)");
}

std::string to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

nlohmann::json DatasetSpec::to_json() const {
  return {{"name", name},
          {"split", to_string(split)},
          {"root", root.string()},
          {"limit", limit},
          {"seed", seed},
          {"synthetic_count", synthetic_count},
          {"synthetic_classes", synthetic_classes},
          {"synthetic_size", synthetic_size},
          {"gtsrb_size", gtsrb_size},
          {"imagenet_classes", imagenet_classes},
          {"imagenet_size", imagenet_size}};
}

DatasetSpec DatasetSpec::from_json(const nlohmann::json& j) {
  DatasetSpec s;
  s.name = j.value("name", s.name);
  s.split = parse_split(j.value("split", to_string(s.split)));
  s.root = j.value("root", std::string());
  s.limit = j.value("limit", s.limit);
  s.seed = j.value("seed", s.seed);
  s.synthetic_count = j.value("synthetic_count", s.synthetic_count);
  s.synthetic_classes = j.value("synthetic_classes", s.synthetic_classes);
  s.synthetic_size = j.value("synthetic_size", s.synthetic_size);
  s.gtsrb_size = j.value("gtsrb_size", s.gtsrb_size);
  s.imagenet_classes = j.value("imagenet_classes", s.imagenet_classes);
  s.imagenet_size = j.value("imagenet_size", s.imagenet_size);
  return s;
}

namespace {

constexpr int64_t kCifarSide = 32;
constexpr int64_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IngestionError("missing dataset file " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path first_existing(std::initializer_list<fs::path> candidates, const std::string& what) {
  for (const auto& c : candidates)
    if (fs::exists(c)) return c;
  std::string tried;
  for (const auto& c : candidates) tried += " " + c.string();
  throw IngestionError("cannot locate " + what + "; tried:" + tried);
}

// CIFAR-10 binary version: records of <1 label byte><3072 CHW pixel bytes>.
Dataset load_cifar10(const DatasetSpec& spec) {
  const fs::path dir = first_existing({spec.root / "cifar-10-batches-bin", spec.root}, "cifar-10-batches-bin");
  std::vector<fs::path> files;
  if (spec.split == Split::kTrain) {
    for (int b = 1; b <= 5; ++b) files.push_back(dir / ("data_batch_" + std::to_string(b) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  std::string raw;
  for (const auto& f : files) {
    std::string part = read_file(f);
    if (part.size() % kCifarRecord != 0) throw IngestionError(f.string() + ": size is not a whole number of records");
    raw += part;
  }
  const int64_t n = static_cast<int64_t>(raw.size()) / kCifarRecord;
  auto bytes = torch::from_blob(raw.data(), {n, kCifarRecord}, torch::kUInt8);
  Dataset d;
  d.name = "cifar10";
  d.num_classes = 10;
  d.labels = bytes.select(1, 0).to(torch::kInt64);
  d.images = bytes.slice(1, 1).reshape({n, 3, kCifarSide, kCifarSide}).to(torch::kFloat32).div_(255.0f);
  if (n > 0 && d.labels.max().item<int64_t>() >= 10) throw IngestionError("cifar10: label byte out of range");
  return d;
}

// Decodes to RGB float CHW in [0,1] at side x side.
torch::Tensor decode_image(const fs::path& p, int64_t side) {
  cv::Mat bgr = cv::imread(p.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IngestionError("cannot decode image " + p.string());
  cv::Mat rgb, resized;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  cv::resize(rgb, resized, cv::Size(static_cast<int>(side), static_cast<int>(side)), 0, 0, cv::INTER_LINEAR);
  auto hwc = torch::from_blob(resized.data, {side, side, 3}, torch::kUInt8).clone();
  return hwc.permute({2, 0, 1}).to(torch::kFloat32).div_(255.0f).contiguous();
}

Dataset stack_images(std::string name, int64_t classes, const std::vector<std::pair<fs::path, int64_t>>& items,
                     int64_t side) {
  Dataset d;
  d.name = std::move(name);
  d.num_classes = classes;
  d.images = torch::empty({static_cast<int64_t>(items.size()), 3, side, side});
  d.labels = torch::empty({static_cast<int64_t>(items.size())}, torch::kInt64);
  for (std::size_t i = 0; i < items.size(); ++i) {
    d.images[static_cast<int64_t>(i)].copy_(decode_image(items[i].first, side));
    d.labels[static_cast<int64_t>(i)] = items[i].second;
  }
  return d;
}

std::vector<std::string> split_csv_line(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, sep)) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  return out;
}

// Reads a GTSRB ground-truth CSV (semicolon separated, header row with
// Filename and ClassId columns).
std::vector<std::pair<fs::path, int64_t>> read_gtsrb_csv(const fs::path& csv, const fs::path& image_dir) {
  std::ifstream f(csv);
  if (!f) throw IngestionError("missing GTSRB annotation file " + csv.string());
  std::string line;
  std::getline(f, line);
  const auto header = split_csv_line(line, ';');
  const auto col = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw IngestionError(csv.string() + ": no column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t file_col = col("Filename");
  const std::size_t class_col = col("ClassId");
  std::vector<std::pair<fs::path, int64_t>> items;
  while (std::getline(f, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line, ';');
    if (cells.size() <= std::max(file_col, class_col)) throw IngestionError(csv.string() + ": short row");
    items.emplace_back(image_dir / cells[file_col], std::stoll(cells[class_col]));
  }
  return items;
}

constexpr int64_t kGtsrbClasses = 43;

Dataset load_gtsrb(const DatasetSpec& spec) {
  std::vector<std::pair<fs::path, int64_t>> items;
  if (spec.split == Split::kTrain) {
    const fs::path dir =
        first_existing({spec.root / "GTSRB" / "Final_Training" / "Images", spec.root / "Final_Training" / "Images"},
                       "GTSRB Final_Training/Images");
    for (int64_t c = 0; c < kGtsrbClasses; ++c) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%05lld", static_cast<long long>(c));
      const fs::path class_dir = dir / buf;
      if (!fs::exists(class_dir)) continue;
      for (auto& it : read_gtsrb_csv(class_dir / ("GT-" + std::string(buf) + ".csv"), class_dir)) items.push_back(it);
    }
    if (items.empty()) throw IngestionError("GTSRB training directory has no class folders: " + dir.string());
  } else {
    const fs::path dir =
        first_existing({spec.root / "GTSRB" / "Final_Test" / "Images", spec.root / "Final_Test" / "Images"},
                       "GTSRB Final_Test/Images");
    const fs::path csv =
        first_existing({spec.root / "GT-final_test.csv", dir / "GT-final_test.csv"}, "GT-final_test.csv");
    items = read_gtsrb_csv(csv, dir);
  }
  for (const auto& [p, label] : items)
    if (label < 0 || label >= kGtsrbClasses) throw IngestionError("GTSRB label out of range in " + p.string());
  return stack_images("gtsrb", kGtsrbClasses, items, spec.gtsrb_size);
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".jpeg" || ext == ".jpg" || ext == ".png" || ext == ".ppm" || ext == ".bmp";
}

// Directory-per-class layout: <root>/<train|val>/<class id>/<image files>.
// The class subset is a fixed-seed shuffle of the sorted training class ids,
// independent of the split's own seed, so train and val agree on it.
Dataset load_imagenet_subset(const DatasetSpec& spec) {
  const fs::path train_dir = first_existing({spec.root / "train"}, "imagenet train/");
  const fs::path split_dir =
      spec.split == Split::kTrain ? train_dir : first_existing({spec.root / "val", spec.root / "test"}, "imagenet val/");
  std::vector<std::string> classes;
  for (const auto& e : fs::directory_iterator(train_dir))
    if (e.is_directory()) classes.push_back(e.path().filename().string());
  std::sort(classes.begin(), classes.end());
  if (static_cast<int64_t>(classes.size()) < spec.imagenet_classes)
    throw IngestionError("imagenet-subset: only " + std::to_string(classes.size()) + " class folders, need " +
                         std::to_string(spec.imagenet_classes));
  std::mt19937_64 rng(derive_seed({0x1a6e7ULL}));
  shuffle(classes.begin(), classes.end(), rng);
  classes.resize(static_cast<std::size_t>(spec.imagenet_classes));
  std::sort(classes.begin(), classes.end());

  std::vector<std::pair<fs::path, int64_t>> items;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const fs::path dir = split_dir / classes[c];
    if (!fs::exists(dir)) throw IngestionError("imagenet-subset: missing class folder " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (auto& f : files) items.emplace_back(f, static_cast<int64_t>(c));
  }
  if (spec.limit > 0 && spec.limit < static_cast<int64_t>(items.size())) {
    // Subsample before decoding; full-resolution subsets do not fit in memory.
    std::mt19937_64 pick(derive_seed({spec.seed, 0x5b5e7ULL}));
    shuffle(items.begin(), items.end(), pick);
    items.resize(static_cast<std::size_t>(spec.limit));
    std::sort(items.begin(), items.end());
  }
  auto d = stack_images("imagenet-subset", spec.imagenet_classes, items, spec.imagenet_size);
  return d;
}

}  // namespace

Dataset load_dataset(const DatasetSpec& spec) {
  Dataset d;
  bool already_limited = false;
  if (spec.name == "cifar10") {
    d = load_cifar10(spec);
  } else if (spec.name == "gtsrb") {
    d = load_gtsrb(spec);
  } else if (spec.name == "imagenet-subset") {
    d = load_imagenet_subset(spec);
    already_limited = true;
  } else if (spec.name == "synthetic") {
    d = make_synthetic(spec.synthetic_count, spec.synthetic_classes, spec.synthetic_size, spec.seed, spec.split);
  } else {
    throw ConfigError("unknown dataset '" + spec.name + "' (expected cifar10|gtsrb|imagenet-subset|synthetic)");
  }
  if (spec.limit > 0 && spec.limit < d.size() && !already_limited) d = take_subset(d, spec.limit, spec.seed);
  d.check_invariants();
  return d;
}

Dataset take_subset(const Dataset& d, int64_t n, uint64_t seed) {
  if (n >= d.size()) return d;
  std::vector<int64_t> idx(static_cast<std::size_t>(d.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
  std::mt19937_64 rng(derive_seed({seed, 0x5b5e7ULL}));
  shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(n));
  std::sort(idx.begin(), idx.end());
  auto sel = torch::tensor(idx, torch::kInt64);
  Dataset out;
  out.name = d.name;
  out.num_classes = d.num_classes;
  out.images = d.images.index_select(0, sel).contiguous();
  out.labels = d.labels.index_select(0, sel).contiguous();
  return out;
}

Dataset exclude_label(const Dataset& d, int64_t label) {
  auto keep = (d.labels != label).nonzero().squeeze(1);
  Dataset out;
  out.name = d.name;
  out.num_classes = d.num_classes;
  out.images = d.images.index_select(0, keep).contiguous();
  out.labels = d.labels.index_select(0, keep).contiguous();
  return out;
}

}  // namespace latentmark
