#pragma once

#include <string>
#include <vector>

namespace anomseg::cli {

// Runs one command (synth | train | eval | ablate | plot) given argv-style
// arguments without the program name. Returns the process exit code:
// 0 success, 1 validation error, 2 runtime/training error.
int run(const std::vector<std::string>& args);

}  // namespace anomseg::cli
