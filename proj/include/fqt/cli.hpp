#pragma once

#include <iosfwd>

namespace fqt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvariant = 1;
inline constexpr int kExitUsage = 2;

/// Entry point of the `fqt` tool: subcommands train, bias, variance, sweep and
/// sparse. Returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fqt::cli
