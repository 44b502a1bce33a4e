// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

namespace tokensel {

// Stderr verbosity, controlled only by the TOKENSEL_LOG environment variable:
// "quiet" silences warnings, "debug" enables extra diagnostics, anything else
// (or unset) is the default "info".
enum class LogLevel { kQuiet = 0, kInfo = 1, kDebug = 2 };

inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("TOKENSEL_LOG");
    if (env == nullptr) return LogLevel::kInfo;
    const std::string_view value(env);
    if (value == "quiet") return LogLevel::kQuiet;
    if (value == "debug") return LogLevel::kDebug;
    return LogLevel::kInfo;
  }();
  return level;
}

inline void log_warn(const std::string& message) {
  if (log_level() >= LogLevel::kInfo) {
    std::cerr << "tokensel: warning: " << message << "\n";
  }
}

inline void log_debug(const std::string& message) {
  if (log_level() >= LogLevel::kDebug) {
    std::cerr << "tokensel: debug: " << message << "\n";
  }
}

}  // namespace tokensel
