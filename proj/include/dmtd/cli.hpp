#pragma once

#include <ostream>

namespace dmtd {

// Exit codes returned by run_cli.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

// Entry point behind the dmtd executable. Subcommands: train, generate,
// eval, bench, inspect. Never throws; errors go to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dmtd
