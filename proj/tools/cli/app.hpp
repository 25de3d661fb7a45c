#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cascade::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kValidation = 1;
inline constexpr int kData = 2;
inline constexpr int kInternal = 3;

/// Runs one command line (args excludes the program name). Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cascade::cli
