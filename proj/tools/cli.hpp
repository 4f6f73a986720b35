#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bdb::cli {

// Runs one command line (args[0] is the program name). Returns the process
// exit code: 0 success, 1 runtime failure, 2 invalid configuration or flags.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bdb::cli
