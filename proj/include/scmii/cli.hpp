#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace scmii {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomainError = 1;
inline constexpr int kExitUsage = 2;

/// Runs one `scmii` subcommand. args excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Applies SCMII_LOG (error, warn, info, debug) to the default logger.
void configure_logging_from_env();

}  // namespace scmii
