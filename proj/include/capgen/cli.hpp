#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace capgen {

/// Exit statuses of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitData = 3,
  kExitInternal = 4,
};

/// Runs one command. `args` excludes the program name. Diagnostics go to
/// `err` as a single line; progress goes to `out`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace capgen
