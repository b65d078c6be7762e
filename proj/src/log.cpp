#include "hmid/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>

#include "hmid/errors.hpp"

namespace hmid::log {

namespace {

Level from_env() {
  const char* v = std::getenv("HMID_LOG");
  if (!v || !*v) return Level::Info;
  try {
    return parse_level(v);
  } catch (const ConfigError&) {
    return Level::Info;
  }
}

std::atomic<int>& level_ref() {
  static std::atomic<int> l{static_cast<int>(from_env())};
  return l;
}

const char* tag(Level l) {
  switch (l) {
    case Level::Debug: return "debug";
    case Level::Info: return "info";
    case Level::Warn: return "warn";
    case Level::Error: return "error";
    default: return "";
  }
}

}  // namespace

Level threshold() { return static_cast<Level>(level_ref().load()); }
void set_threshold(Level l) { level_ref().store(static_cast<int>(l)); }

Level parse_level(const std::string& name) {
  if (name == "debug") return Level::Debug;
  if (name == "info") return Level::Info;
  if (name == "warn") return Level::Warn;
  if (name == "error") return Level::Error;
  if (name == "off") return Level::Off;
  throw ConfigError("unknown log level '" + name + "'");
}

void write(Level l, const std::string& msg) {
  if (l < threshold() || l == Level::Off) return;
  static std::mutex mu;
  std::lock_guard lk(mu);
  std::cerr << "[" << tag(l) << "] " << msg << '\n';
}

}  // namespace hmid::log
