#pragma once

#include <string>
#include <vector>

namespace masker::cli {

/// Runs one command line (argv without the program name) and returns the
/// process exit code: 0 on success, 2 for configuration/usage errors,
/// 3 for data errors, 4 when training diverges.
int run(const std::vector<std::string>& args);

}  // namespace masker::cli
