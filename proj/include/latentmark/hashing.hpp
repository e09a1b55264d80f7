// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace latentmark {

// Lowercase hex SHA-256.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

// 64-bit FNV-1a; used for content-keyed seeding, not for integrity.
std::uint64_t fnv1a64(std::span<const std::byte> bytes);

}  // namespace latentmark
