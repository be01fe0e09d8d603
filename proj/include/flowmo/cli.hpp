#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace flowmo::cli {

/// Runs one command line (args[0] is the program name). Returns the exit
/// status; errors are reported on `err` with their type name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace flowmo::cli
