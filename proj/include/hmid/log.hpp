#pragma once

#include <string>

// Logging to stderr. The threshold comes from HMID_LOG (debug|info|warn|error|off),
// default info.
namespace hmid::log {

enum class Level { Debug = 0, Info, Warn, Error, Off };

Level threshold();
void set_threshold(Level l);
/// Throws ConfigError on an unknown name.
Level parse_level(const std::string& name);

void write(Level l, const std::string& msg);
inline void debug(const std::string& m) { write(Level::Debug, m); }
inline void info(const std::string& m) { write(Level::Info, m); }
inline void warn(const std::string& m) { write(Level::Warn, m); }
inline void error(const std::string& m) { write(Level::Error, m); }

}  // namespace hmid::log
