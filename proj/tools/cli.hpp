#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace biaslens::cli {

// Runs one command line (without the program name). Returns the process exit
// code: 0 ok, 1 invalid input, 2 runtime failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace biaslens::cli
