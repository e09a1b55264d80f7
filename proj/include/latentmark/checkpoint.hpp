// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

// Versioned binary container shared by every persisted artifact (injector,
// extractor, joint, victim checkpoints and poisoned datasets).
//
// Layout:
//   "LMKCKPT\0"            8-byte magic
//   u32  format version
//   u64  header length, then a JSON header {kind, meta, entries[]}
//   raw payload: tensors (little-endian, contiguous) and opaque blobs
//   64 ASCII hex chars: SHA-256 of every preceding byte
//
// Readers verify magic, version and digest before exposing anything.

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace latentmark {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

class CheckpointWriter {
 public:
  explicit CheckpointWriter(std::string kind);

  nlohmann::json& meta() { return meta_; }
  void add_tensor(const std::string& name, const torch::Tensor& tensor);
  void add_blob(const std::string& name, std::string bytes);
  // Adds every parameter and buffer of `module` under `prefix`.
  void add_module(const std::string& prefix, const torch::nn::Module& module);

  // Writes to a sibling temp file and renames, so readers never see a torn file.
  void write(const std::filesystem::path& path) const;

 private:
  std::string kind_;
  nlohmann::json meta_ = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors_;
  std::vector<std::pair<std::string, std::string>> blobs_;
};

class CheckpointReader {
 public:
  // Throws IntegrityError on bad magic, unknown version, truncation or digest
  // mismatch; IoError when the file cannot be opened.
  static CheckpointReader open(const std::filesystem::path& path);

  const std::string& kind() const { return kind_; }
  const nlohmann::json& meta() const { return meta_; }
  bool has_tensor(const std::string& name) const { return tensors_.count(name) != 0; }
  const torch::Tensor& tensor(const std::string& name) const;
  bool has_blob(const std::string& name) const { return blobs_.count(name) != 0; }
  const std::string& blob(const std::string& name) const;
  std::vector<std::string> tensor_names() const;

  // Copies parameters/buffers saved under `prefix` into `module`. Missing
  // entries or shape differences raise ConfigError.
  void load_module(const std::string& prefix, torch::nn::Module& module) const;

  // Throws IntegrityError unless kind() == expected.
  void expect_kind(const std::string& expected) const;

 private:
  std::string kind_;
  nlohmann::json meta_;
  std::map<std::string, torch::Tensor> tensors_;
  std::map<std::string, std::string> blobs_;
};

}  // namespace latentmark
