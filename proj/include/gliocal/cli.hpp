#pragma once

#include <string>
#include <vector>

namespace gliocal {

// Entry point for the command-line tool. Exit code 0 on success, 1 on
// validation/input errors, 2 on numerical failure; errors print one line to
// standard error prefixed "gliocal: error:".
int run_cli(int argc, const char* const* argv);

std::vector<double> parse_day_list(const std::string& csv);

}  // namespace gliocal
