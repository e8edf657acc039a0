#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>
#include <utility>

namespace s2d {

// Process-wide warning sink. Defaults to stderr; tests swap in a collector.
using WarningHandler = std::function<void(std::string_view)>;

namespace detail {
inline WarningHandler& warning_handler() {
  static WarningHandler handler = [](std::string_view msg) {
    std::cerr << "s2d: warning: " << msg << '\n';
  };
  return handler;
}
inline std::mutex& warning_mutex() {
  static std::mutex m;
  return m;
}
} // namespace detail

inline void warn(std::string_view msg) {
  std::lock_guard lock(detail::warning_mutex());
  if (detail::warning_handler()) detail::warning_handler()(msg);
}

/// Replace the warning sink and return the previous one.
inline WarningHandler set_warning_handler(WarningHandler h) {
  std::lock_guard lock(detail::warning_mutex());
  return std::exchange(detail::warning_handler(), std::move(h));
}

/// RAII swap of the warning sink.
class ScopedWarningHandler {
public:
  explicit ScopedWarningHandler(WarningHandler h) : prev_(set_warning_handler(std::move(h))) {}
  ~ScopedWarningHandler() { set_warning_handler(std::move(prev_)); }
  ScopedWarningHandler(const ScopedWarningHandler&) = delete;
  ScopedWarningHandler& operator=(const ScopedWarningHandler&) = delete;

private:
  WarningHandler prev_;
};

} // namespace s2d
