#pragma once

// Command-line front end. Every command is a pure function of its config,
// seed and input files; only the run manifests carry timestamps.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <string>
#include <vector>

namespace ebsa::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Parses argv (argv[0] is the program name) and dispatches to
/// gen | train | eval | sweep | trace.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace ebsa::cli
