#pragma once

#include <stdexcept>
#include <string>

namespace hmid {

/// Caller broke an operation's precondition (shape mismatch, off-manifold input, ...).
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

/// Input outside the mathematical domain of an operation (e.g. aperture of the root).
class DomainError : public std::domain_error {
 public:
  explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

/// Geometry that is undefined for coincident points.
class DegeneracyError : public std::runtime_error {
 public:
  explicit DegeneracyError(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid user configuration. `line` is 0 when not tied to a config file line.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what, int line = 0)
      : std::runtime_error(what), line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

/// Loss or gradient became NaN/Inf during training.
class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& what) : std::runtime_error(what) {}
};

/// Filesystem failure, always carrying the offending path.
class IoError : public std::runtime_error {
 public:
  IoError(const std::string& what, const std::string& path)
      : std::runtime_error(what + ": " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

#define HMID_REQUIRE(cond, msg)                       \
  do {                                                \
    if (!(cond)) throw ::hmid::ContractViolation(msg); \
  } while (0)

}  // namespace hmid
