#pragma once

#include <iosfwd>

namespace hvm {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,         // bad arguments or configuration
  kExitVerification = 2,  // gradcheck failure
  kExitRuntime = 3,       // I/O, numerical or other runtime failure
};

// Entry point for the `hvmunet` tool; writes reports to `out` and diagnostics to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hvm
