#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace deepimp::cli {

enum ExitCode : int { ok = 0, usage = 1, data_error = 2, numeric_failure = 3 };

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace deepimp::cli
