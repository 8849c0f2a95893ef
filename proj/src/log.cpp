#include "zsih/log.hpp"

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>

namespace zsih::log {
namespace {

std::mutex mu;
std::optional<Level> level_override;
std::ostream* sink_override = nullptr;

Level from_env() {
  const char* v = std::getenv("ZSIH_LOG");
  if (v == nullptr) return Level::info;
  const std::string s(v);
  if (s == "error") return Level::error;
  if (s == "debug") return Level::debug;
  return Level::info;
}

const char* tag(Level level) {
  switch (level) {
    case Level::error: return "error";
    case Level::info: return "info";
    case Level::debug: return "debug";
  }
  return "?";
}

}  // namespace

Level threshold() {
  std::lock_guard lock(mu);
  return level_override ? *level_override : from_env();
}

void set_threshold(Level level) {
  std::lock_guard lock(mu);
  level_override = level;
}

void set_sink(std::ostream* sink) {
  std::lock_guard lock(mu);
  sink_override = sink;
}

void write(Level level, std::string_view message) {
  if (static_cast<int>(level) > static_cast<int>(threshold())) return;
  std::lock_guard lock(mu);
  std::ostream& os = sink_override ? *sink_override : std::cerr;
  os << "zsih " << tag(level) << ": " << message << '\n';
}

}  // namespace zsih::log
