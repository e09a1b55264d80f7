// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include "latentmark/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "latentmark/errors.hpp"
#include "latentmark/hashing.hpp"

namespace latentmark {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'L', 'M', 'K', 'C', 'K', 'P', 'T', '\0'};
constexpr std::size_t kDigestChars = 64;

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32:
      return "f32";
    case torch::kFloat64:
      return "f64";
    case torch::kInt64:
      return "i64";
    case torch::kInt32:
      return "i32";
    case torch::kUInt8:
      return "u8";
    case torch::kBool:
      return "bool";
    default:
      throw Error(std::string("checkpoint: unsupported dtype ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from(const std::string& s) {
  if (s == "f32") return torch::kFloat32;
  if (s == "f64") return torch::kFloat64;
  if (s == "i64") return torch::kInt64;
  if (s == "i32") return torch::kInt32;
  if (s == "u8") return torch::kUInt8;
  if (s == "bool") return torch::kBool;
  throw IntegrityError("checkpoint: unknown dtype tag '" + s + "'");
}

template <typename T>
void append_pod(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T read_pod(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw IntegrityError("checkpoint: truncated header");
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

}  // namespace

CheckpointWriter::CheckpointWriter(std::string kind) : kind_(std::move(kind)) {}

void CheckpointWriter::add_tensor(const std::string& name, const torch::Tensor& tensor) {
  tensors_.emplace_back(name, tensor.detach().to(torch::kCPU).contiguous().clone());
}

void CheckpointWriter::add_blob(const std::string& name, std::string bytes) {
  blobs_.emplace_back(name, std::move(bytes));
}

void CheckpointWriter::add_module(const std::string& prefix, const torch::nn::Module& module) {
  for (const auto& p : module.named_parameters(/*recurse=*/true)) add_tensor(prefix + p.key(), p.value());
  for (const auto& b : module.named_buffers(/*recurse=*/true)) add_tensor(prefix + b.key(), b.value());
}

void CheckpointWriter::write(const std::filesystem::path& path) const {
  nlohmann::json entries = nlohmann::json::array();
  std::string payload;
  for (const auto& [name, t] : tensors_) {
    const auto nbytes = static_cast<std::size_t>(t.numel()) * t.element_size();
    entries.push_back({{"name", name},
                       {"type", "tensor"},
                       {"dtype", dtype_name(t.scalar_type())},
                       {"shape", t.sizes().vec()},
                       {"offset", payload.size()},
                       {"nbytes", nbytes}});
    payload.append(static_cast<const char*>(t.data_ptr()), nbytes);
  }
  for (const auto& [name, bytes] : blobs_) {
    entries.push_back({{"name", name}, {"type", "blob"}, {"offset", payload.size()}, {"nbytes", bytes.size()}});
    payload.append(bytes);
  }
  const nlohmann::json header = {{"kind", kind_}, {"meta", meta_}, {"entries", entries}};
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  append_pod<std::uint32_t>(out, kCheckpointFormatVersion);
  append_pod<std::uint64_t>(out, header_text.size());
  out += header_text;
  out += payload;
  out += sha256_hex(std::string_view(out));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write on " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointReader CheckpointReader::open(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string data = ss.str();

  if (data.size() < sizeof(kMagic) + 12 + kDigestChars || std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0)
    throw IntegrityError("checkpoint " + path.string() + ": bad magic or truncated file");
  const std::string_view body(data.data(), data.size() - kDigestChars);
  const std::string_view digest(data.data() + body.size(), kDigestChars);
  if (sha256_hex(body) != digest) throw IntegrityError("checkpoint " + path.string() + ": digest mismatch");

  std::size_t pos = sizeof(kMagic);
  const auto version = read_pod<std::uint32_t>(data, pos);
  if (version != kCheckpointFormatVersion)
    throw IntegrityError("checkpoint " + path.string() + ": unsupported format version " + std::to_string(version));
  const auto header_len = read_pod<std::uint64_t>(data, pos);
  if (pos + header_len > body.size()) throw IntegrityError("checkpoint: header overruns file");

  CheckpointReader r;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(data.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("checkpoint: malformed header: ") + e.what());
  }
  pos += header_len;
  const std::size_t payload_begin = pos;
  const std::size_t payload_size = body.size() - payload_begin;

  r.kind_ = header.at("kind").get<std::string>();
  r.meta_ = header.at("meta");
  for (const auto& e : header.at("entries")) {
    const auto offset = e.at("offset").get<std::size_t>();
    const auto nbytes = e.at("nbytes").get<std::size_t>();
    if (offset + nbytes > payload_size) throw IntegrityError("checkpoint: entry overruns payload");
    const char* src = data.data() + payload_begin + offset;
    const auto name = e.at("name").get<std::string>();
    if (e.at("type") == "tensor") {
      const auto shape = e.at("shape").get<std::vector<int64_t>>();
      auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(e.at("dtype").get<std::string>())));
      if (static_cast<std::size_t>(t.numel()) * t.element_size() != nbytes)
        throw IntegrityError("checkpoint: size mismatch for tensor " + name);
      std::memcpy(t.data_ptr(), src, nbytes);
      r.tensors_.emplace(name, std::move(t));
    } else {
      r.blobs_.emplace(name, std::string(src, nbytes));
    }
  }
  return r;
}

const torch::Tensor& CheckpointReader::tensor(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw IntegrityError("checkpoint: missing tensor " + name);
  return it->second;
}

const std::string& CheckpointReader::blob(const std::string& name) const {
  auto it = blobs_.find(name);
  if (it == blobs_.end()) throw IntegrityError("checkpoint: missing blob " + name);
  return it->second;
}

std::vector<std::string> CheckpointReader::tensor_names() const {
  std::vector<std::string> names;
  names.reserve(tensors_.size());
  for (const auto& [k, v] : tensors_) names.push_back(k);
  return names;
}

void CheckpointReader::load_module(const std::string& prefix, torch::nn::Module& module) const {
  torch::NoGradGuard no_grad;
  auto copy_into = [&](const std::string& key, torch::Tensor& dst) {
    auto it = tensors_.find(prefix + key);
    if (it == tensors_.end()) throw ConfigError("checkpoint does not match model: missing " + prefix + key);
    if (it->second.sizes() != dst.sizes())
      throw ConfigError("checkpoint does not match model: shape of " + prefix + key + " differs");
    dst.copy_(it->second);
  };
  for (auto& p : module.named_parameters(true)) copy_into(p.key(), p.value());
  for (auto& b : module.named_buffers(true)) copy_into(b.key(), b.value());
}

void CheckpointReader::expect_kind(const std::string& expected) const {
  if (kind_ != expected) throw IntegrityError("checkpoint kind is '" + kind_ + "', expected '" + expected + "'");
}

}  // namespace latentmark
