// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include <torch/torch.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "latentmark/checkpoint.hpp"
#include "latentmark/data.hpp"
#include "latentmark/errors.hpp"
#include "latentmark/hashing.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace latentmark;

namespace {

// Writes a binary P6 image with a constant colour.
void write_ppm(const fs::path& p, int w, int h, uint8_t r, uint8_t g, uint8_t b) {
  std::ofstream f(p, std::ios::binary);
  f << "P6\n" << w << " " << h << "\n255\n";
  for (int i = 0; i < w * h; ++i) f.put(static_cast<char>(r)).put(static_cast<char>(g)).put(static_cast<char>(b));
}

Dataset constant_dataset(int64_t n, int64_t classes, float value) {
  Dataset d;
  d.name = "const";
  d.num_classes = classes;
  d.images = torch::full({n, 3, 8, 8}, value);
  d.labels = torch::arange(n, torch::kInt64).remainder(classes);
  return d;
}

}  // namespace

TEST_CASE("cifar10 binary records decode to [0,1] images and labels") {
  testutil::TempDir tmp;
  const fs::path dir = tmp.path() / "cifar-10-batches-bin";
  fs::create_directories(dir);
  std::string bytes;
  for (int r = 0; r < 3; ++r) {
    bytes.push_back(static_cast<char>(r + 4));
    for (int i = 0; i < 3 * 32 * 32; ++i) bytes.push_back(static_cast<char>((i + r) % 256));
  }
  std::ofstream(dir / "test_batch.bin", std::ios::binary) << bytes;

  DatasetSpec spec;
  spec.name = "cifar10";
  spec.split = Split::kTest;
  spec.root = tmp.path();
  const Dataset d = load_dataset(spec);
  CHECK(d.size() == 3);
  CHECK(d.num_classes == 10);
  CHECK(d.height() == 32);
  CHECK(d.labels[2].item<int64_t>() == 6);
  // channel-major record layout: pixel (c, y, x) is byte 1 + c*1024 + y*32 + x
  CHECK(d.images[1][2][3][5].item<float>() == doctest::Approx(((2 * 1024 + 3 * 32 + 5 + 1) % 256) / 255.0));

  spec.split = Split::kTrain;
  CHECK_THROWS_AS(load_dataset(spec), IngestionError);
}

TEST_CASE("cifar10 rejects truncated files") {
  testutil::TempDir tmp;
  std::ofstream(tmp.path() / "test_batch.bin", std::ios::binary) << std::string(100, '\0');
  DatasetSpec spec;
  spec.name = "cifar10";
  spec.split = Split::kTest;
  spec.root = tmp.path();
  CHECK_THROWS_AS(load_dataset(spec), IngestionError);
}

TEST_CASE("gtsrb training folders and ground-truth csv") {
  testutil::TempDir tmp;
  for (int c : {0, 2}) {
    char name[16];
    std::snprintf(name, sizeof(name), "%05d", c);
    const fs::path dir = tmp.path() / "Final_Training" / "Images" / name;
    fs::create_directories(dir);
    std::ofstream csv(dir / ("GT-" + std::string(name) + ".csv"));
    csv << "Filename;Width;Height;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId\n";
    for (int i = 0; i < 2; ++i) {
      const std::string file = "img" + std::to_string(i) + ".ppm";
      write_ppm(dir / file, 40, 30, 255, static_cast<uint8_t>(c * 100), 0);
      csv << file << ";40;30;0;0;39;29;" << c << "\n";
    }
  }
  DatasetSpec spec;
  spec.name = "gtsrb";
  spec.root = tmp.path();
  spec.gtsrb_size = 16;
  const Dataset d = load_dataset(spec);
  CHECK(d.size() == 4);
  CHECK(d.num_classes == 43);
  CHECK(d.height() == 16);
  CHECK(d.labels[3].item<int64_t>() == 2);
  // RGB order after decoding: red channel saturated, green encodes the class.
  CHECK(d.images[0][0].mean().item<float>() == doctest::Approx(1.0));
  CHECK(d.images[3][1].mean().item<float>() == doctest::Approx(200.0 / 255.0).epsilon(1e-5));
}

TEST_CASE("imagenet subset keeps exactly the configured number of classes, same on both splits") {
  testutil::TempDir tmp;
  for (const char* split : {"train", "val"}) {
    for (int c = 0; c < 6; ++c) {
      const fs::path dir = tmp.path() / split / ("n0" + std::to_string(c));
      fs::create_directories(dir);
      for (int i = 0; i < 2; ++i) write_ppm(dir / ("x" + std::to_string(i) + ".ppm"), 20, 20, static_cast<uint8_t>(c * 40), 0, 0);
    }
  }
  DatasetSpec spec;
  spec.name = "imagenet-subset";
  spec.root = tmp.path();
  spec.imagenet_classes = 3;
  spec.imagenet_size = 8;
  spec.seed = 1;
  const Dataset tr = load_dataset(spec);
  spec.split = Split::kTest;
  spec.seed = 99;  // split seeds differ in practice; the class choice must not
  const Dataset va = load_dataset(spec);
  CHECK(tr.num_classes == 3);
  CHECK(tr.size() == 6);
  std::set<int64_t> labels;
  for (int64_t i = 0; i < tr.size(); ++i) labels.insert(tr.labels[i].item<int64_t>());
  CHECK(labels.size() == 3);
  // Red intensity identifies the source folder; both splits must pick the same folders.
  CHECK(torch::equal(tr.images.select(1, 0).mean({1, 2}), va.images.select(1, 0).mean({1, 2})));
}

TEST_CASE("unknown dataset name is a configuration error; missing files an ingestion error") {
  DatasetSpec spec;
  spec.name = "mnist";
  CHECK_THROWS_AS(load_dataset(spec), ConfigError);
  spec.name = "gtsrb";
  spec.root = "/nonexistent";
  CHECK_THROWS_AS(load_dataset(spec), IngestionError);
}

TEST_CASE("synthetic dataset is deterministic, in range and balanced enough") {
  const Dataset a = make_synthetic(64, 4, 32, 7, Split::kTrain);
  const Dataset b = make_synthetic(64, 4, 32, 7, Split::kTrain);
  const Dataset c = make_synthetic(64, 4, 32, 8, Split::kTrain);
  CHECK(a.size() == 64);
  CHECK(a.num_classes == 4);
  CHECK(torch::equal(a.images, b.images));
  CHECK(torch::equal(a.labels, b.labels));
  CHECK_FALSE(torch::equal(a.images, c.images));
  CHECK(a.images.min().item<float>() >= 0.0f);
  CHECK(a.images.max().item<float>() <= 1.0f);
  a.check_invariants();
  DatasetSpec spec;
  spec.synthetic_count = 64;
  CHECK(load_dataset(spec).size() == 64);
  CHECK_THROWS_AS(make_synthetic(8, 11, 32, 0, Split::kTrain), ConfigError);
}

TEST_CASE("blend_inject identity, replacement and arithmetic cases") {
  auto x = torch::rand({2, 3, 8, 8});
  auto m = torch::rand({1, 8, 8});
  CHECK(torch::equal(blend_inject(x, m, 0.0), x));
  CHECK(torch::equal(blend_inject(x, m, 1.0), m.expand({2, 3, 8, 8})));
  auto half = torch::full({3, 4, 4}, 0.5f);
  auto ones = torch::ones({1, 4, 4});
  CHECK(torch::allclose(blend_inject(half, ones, 0.2), torch::full({3, 4, 4}, 0.6f), 0.0, 1e-7));
  CHECK_THROWS_AS(blend_inject(x, torch::rand({1, 7, 8}), 0.5), ShapeError);
}

TEST_CASE("blend_inject is affine in lambda (three values collinear per pixel)") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    torch::manual_seed(trial);
    auto x = torch::rand({3, 9, 7});
    auto m = torch::rand({1, 9, 7});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double l1 = u(rng), l2 = u(rng), t = u(rng);
    const double l3 = l1 + t * (l2 - l1);
    auto b1 = blend_inject(x, m, l1).to(torch::kFloat64), b2 = blend_inject(x, m, l2).to(torch::kFloat64),
         b3 = blend_inject(x, m, l3).to(torch::kFloat64);
    CHECK((b3 - (b1 + t * (b2 - b1))).abs().max().item<double>() < 1e-6);
  }
}

TEST_CASE("patch trigger stamps only the corner patch") {
  const auto trig = make_patch_trigger(8, 8, 3, 1);
  auto x = torch::full({1, 3, 8, 8}, 0.25f);
  auto y = blend_inject_alpha(x, trig.pattern, trig.alpha);
  CHECK(trig.alpha.sum().item<float>() == 9.0f);
  CHECK(torch::equal(y.slice(2, 0, 4), x.slice(2, 0, 4)));
  CHECK_FALSE(torch::equal(y, x));
}

TEST_CASE("poison count equals round(rho * N) for random rho and N") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = static_cast<int64_t>(1 + rng() % 500);
    const double rho = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const auto idx = select_poison_indices(n, rho, rng());
    CHECK(static_cast<int64_t>(idx.size()) == std::llround(rho * static_cast<double>(n)));
    CHECK(std::set<int64_t>(idx.begin(), idx.end()).size() == idx.size());
    CHECK(std::is_sorted(idx.begin(), idx.end()));
  }
  CHECK(select_poison_indices(50000, 0.1, 1).size() == 5000);
  CHECK(select_poison_indices(100, 0.3, 5) == select_poison_indices(100, 0.3, 5));
}

TEST_CASE("build_poisoned_dataset: labels, masks, originals") {
  const Dataset clean = make_synthetic(64, 4, 8, 1, Split::kTrain);
  const auto trig = make_patch_trigger(8, 8);
  PoisonSpec spec;
  spec.mode = InjectionMode::kLinearBlend;

  SUBCASE("rho = 0 leaves the data byte-identical") {
    spec.ratio = 0.0;
    const auto p = build_poisoned_dataset(clean, spec, nullptr, &trig, 3);
    CHECK(p.poisoned_count() == 0);
    CHECK(torch::equal(p.data.images, clean.images));
    CHECK(torch::equal(p.data.labels, clean.labels));
  }
  SUBCASE("rho = 1, t = 0 relabels all 64 and keeps originals") {
    spec.ratio = 1.0;
    spec.target_label = 0;
    const auto p = build_poisoned_dataset(clean, spec, nullptr, &trig, 3);
    CHECK(p.poisoned_count() == 64);
    CHECK(p.data.labels.eq(0).all().item<bool>());
    for (int64_t i = 0; i < 64; ++i) CHECK(p.original_labels[static_cast<std::size_t>(i)] == clean.labels[i].item<int64_t>());
  }
  SUBCASE("unpoisoned examples keep image and label; poisoned carry the target") {
    spec.ratio = 0.25;
    spec.target_label = 2;
    const auto p = build_poisoned_dataset(clean, spec, nullptr, &trig, 9);
    CHECK(p.poisoned_count() == 16);
    for (int64_t i = 0; i < 64; ++i) {
      if (p.poison_mask[static_cast<std::size_t>(i)]) {
        CHECK(p.data.labels[i].item<int64_t>() == 2);
      } else {
        CHECK(p.data.labels[i].item<int64_t>() == clean.labels[i].item<int64_t>());
        CHECK(torch::equal(p.data.images[i], clean.images[i]));
      }
    }
  }
  SUBCASE("learned mode without an injector is a configuration error") {
    spec.mode = InjectionMode::kLearnedInjector;
    CHECK_THROWS_AS(build_poisoned_dataset(clean, spec, nullptr, nullptr, 1), ConfigError);
  }
  SUBCASE("learned mode applies the injector to exactly the selected images") {
    spec.mode = InjectionMode::kLearnedInjector;
    spec.ratio = 0.5;
    const InjectFn fn = [](const torch::Tensor& x) { return 1.0 - x; };
    const auto p = build_poisoned_dataset(clean, spec, &fn, nullptr, 4);
    for (int64_t i : p.poisoned_indices()) CHECK(torch::allclose(p.data.images[i], 1.0 - clean.images[i]));
  }
}

TEST_CASE("poison spec validation") {
  PoisonSpec s;
  s.ratio = 1.5;
  CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("ratio out of [0,1]"), ConfigError);
  s.ratio = 0.1;
  s.target_label = 10;
  CHECK_THROWS_AS(s.validate(10), ConfigError);
  CHECK(parse_injection_mode("LINEAR_BLEND") == InjectionMode::kLinearBlend);
  CHECK_THROWS_AS(parse_injection_mode("bogus"), ConfigError);
}

TEST_CASE("poisoned dataset and manifest round-trip") {
  testutil::TempDir tmp;
  const Dataset clean = make_synthetic(32, 4, 8, 2, Split::kTrain);
  const auto trig = make_patch_trigger(8, 8);
  PoisonSpec spec;
  spec.mode = InjectionMode::kLinearBlend;
  spec.ratio = 0.25;
  const auto p = build_poisoned_dataset(clean, spec, nullptr, &trig, 5);
  save_poisoned_dataset(p, tmp.path() / "p.ckpt");
  const auto q = load_poisoned_dataset(tmp.path() / "p.ckpt");
  CHECK(torch::equal(p.data.images, q.data.images));
  CHECK(torch::equal(p.data.labels, q.data.labels));
  CHECK(p.poison_mask == q.poison_mask);
  CHECK(p.original_labels == q.original_labels);
  CHECK(q.data.num_classes == 4);
  const auto m = poison_manifest(p);
  CHECK(m.at("poisoned_indices").get<std::vector<int64_t>>() == p.poisoned_indices());
  CHECK(m.at("seed").get<uint64_t>() == 5);
}

TEST_CASE("checkpoint container: digest, version and kind are enforced") {
  testutil::TempDir tmp;
  const fs::path path = tmp.path() / "c.ckpt";
  CheckpointWriter w("unit");
  w.meta()["answer"] = 42;
  w.add_tensor("a", torch::arange(6, torch::kFloat32).reshape({2, 3}));
  w.add_tensor("b", torch::tensor({1, 2, 3}, torch::kInt64));
  w.add_blob("blob", std::string("\0\1\2", 3));
  w.write(path);

  const auto r = CheckpointReader::open(path);
  CHECK(r.kind() == "unit");
  CHECK(r.meta().at("answer") == 42);
  CHECK(torch::equal(r.tensor("a"), torch::arange(6, torch::kFloat32).reshape({2, 3})));
  CHECK(r.tensor("b").dtype() == torch::kInt64);
  CHECK(r.blob("blob") == std::string("\0\1\2", 3));
  CHECK_THROWS_AS(r.expect_kind("other"), IntegrityError);

  // Flip one payload byte: the digest must catch it.
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  bytes[bytes.size() - 70] ^= 0x1;
  std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
  CHECK_THROWS_AS(CheckpointReader::open(path), IntegrityError);
  CHECK_THROWS_AS(CheckpointReader::open(tmp.path() / "missing.ckpt"), IoError);
}

TEST_CASE("sha256 and fnv1a known vectors") {
  CHECK(sha256_hex(std::string_view("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex(std::string_view("")) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  const std::string a = "a";
  CHECK(fnv1a64(std::as_bytes(std::span<const char>(a.data(), a.size()))) == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("dataset invariants reject out-of-range pixels and labels") {
  auto d = constant_dataset(4, 2, 0.5f);
  d.check_invariants();
  d.images[0][0][0][0] = 1.5f;
  CHECK_THROWS_AS(d.check_invariants(), IngestionError);
  d = constant_dataset(4, 2, 0.5f);
  d.labels[1] = 2;
  CHECK_THROWS_AS(d.check_invariants(), IngestionError);
}
