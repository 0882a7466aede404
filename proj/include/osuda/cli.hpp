#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace osuda {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitRuntime = 3 };

// Entry point of the osuda binary. args excludes the program name.
// Subcommands: train, eval, augment-dump, make-synth.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace osuda
