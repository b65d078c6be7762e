#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace hmid::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,  // command ran but its check failed (grad-check)
  kUsage = 2,
  kConfig = 3,
  kIo = 4,
  kContract = 5,
  kNonFinite = 6,
  kInternal = 7,
};

/// Runs one subcommand. `args` excludes the program name. Results go to `out`
/// (tables, then one JSON line); errors go to `err` as a single line.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hmid::cli
