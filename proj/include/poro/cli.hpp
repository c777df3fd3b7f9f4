#pragma once

#include <string>
#include <vector>

namespace poro::cli {

/// Runs one subcommand; args excludes the program name.
/// Exit codes: 0 success, 1 domain error, 2 usage error.
int dispatch(const std::vector<std::string>& args);

}  // namespace poro::cli
