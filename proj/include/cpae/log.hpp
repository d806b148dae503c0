#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace cpae {

enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };

// Verbosity comes from the CPAE_LOG environment variable
// (error|warn|info|debug); default is warn.
inline LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("CPAE_LOG");
    if (!env) return LogLevel::Warn;
    if (std::strcmp(env, "error") == 0) return LogLevel::Error;
    if (std::strcmp(env, "info") == 0) return LogLevel::Info;
    if (std::strcmp(env, "debug") == 0) return LogLevel::Debug;
    return LogLevel::Warn;
  }();
  return level;
}

template <typename... Args>
void log(LogLevel level, const char* fmt, Args... args) {
  if (level > log_level()) return;
  const char* tag = level == LogLevel::Error  ? "error"
                    : level == LogLevel::Warn ? "warn"
                    : level == LogLevel::Info ? "info"
                                              : "debug";
  std::fprintf(stderr, "[cpae:%s] ", tag);
  if constexpr (sizeof...(args) == 0) {
    std::fputs(fmt, stderr);
  } else {
    std::fprintf(stderr, fmt, args...);
  }
  std::fputc('\n', stderr);
}

#define CPAE_LOG_INFO(...) ::cpae::log(::cpae::LogLevel::Info, __VA_ARGS__)
#define CPAE_LOG_WARN(...) ::cpae::log(::cpae::LogLevel::Warn, __VA_ARGS__)
#define CPAE_LOG_DEBUG(...) ::cpae::log(::cpae::LogLevel::Debug, __VA_ARGS__)

}  // namespace cpae
