#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dermgan {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;  // unknown subcommand, bad flag, invalid config

/// Runs one pipeline subcommand. `args` excludes the program name. Logs and
/// diagnostics go to `err`, help text to `out`; results are written to files
/// under --out together with resolved_config.json.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_command(const std::vector<std::string>& args);

inline constexpr const char* kResolvedConfig = "resolved_config.json";

}  // namespace dermgan
