#pragma once

#include <iosfwd>

namespace lsa::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

/// Parses argv and runs one subcommand (simulate, fit, select, compare,
/// summarize, grid). Normal output goes to `out`, messages and progress to
/// `err`. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace lsa::cli
