#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sefa::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

/// Build metadata printed by --version.
std::string version_string();

/// Parses and runs one command line. Returns 0 on success, 1 for invalid usage or
/// configuration, 2 for runtime failures.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace sefa::cli
