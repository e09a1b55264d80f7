// Copyright 2026 The latentmark Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal leveled logging to stderr. LATENTMARK_LOG=quiet|warn|info|debug.

#pragma once

#include <sstream>
#include <string>

namespace latentmark {

enum class LogLevel { kQuiet = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

LogLevel log_level();
void set_log_level(LogLevel level);
void log_line(LogLevel level, const std::string& msg);

namespace detail {

class LogStream {
 public:
  explicit LogStream(LogLevel level) : level_(level) {}
  ~LogStream() { log_line(level_, os_.str()); }
  template <class T>
  LogStream& operator<<(const T& v) {
    os_ << v;
    return *this;
  }

 private:
  LogLevel level_;
  std::ostringstream os_;
};

}  // namespace detail

}  // namespace latentmark

#define LM_LOG(level)                                                          \
  if (::latentmark::log_level() < ::latentmark::LogLevel::level) {            \
  } else                                                                       \
    ::latentmark::detail::LogStream(::latentmark::LogLevel::level)
