// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

#include "latentmark/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string_view>

namespace latentmark {
namespace {

LogLevel level_from_env() {
  const char* v = std::getenv("LATENTMARK_LOG");
  if (v == nullptr) return LogLevel::kInfo;
  const std::string_view s(v);
  if (s == "quiet") return LogLevel::kQuiet;
  if (s == "warn") return LogLevel::kWarn;
  if (s == "debug") return LogLevel::kDebug;
  return LogLevel::kInfo;
}

std::atomic<int>& level_slot() {
  static std::atomic<int> level{static_cast<int>(level_from_env())};
  return level;
}

}  // namespace

LogLevel log_level() { return static_cast<LogLevel>(level_slot().load(std::memory_order_relaxed)); }

void set_log_level(LogLevel level) { level_slot().store(static_cast<int>(level), std::memory_order_relaxed); }

void log_line(LogLevel level, const std::string& msg) {
  static std::mutex mu;
  const char* tag = level == LogLevel::kWarn ? "W " : level == LogLevel::kDebug ? "D " : "I ";
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << tag << msg << '\n';
}

}  // namespace latentmark
