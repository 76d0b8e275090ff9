#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace snet {

// Command-line surface: enhance, train, synth, fit, eval, ssr, gradcheck,
// params. `args` is argv without the program name. All normal and error
// output goes to the given streams; the return value is the process exit
// code (0 success, 1 usage, 2 bad data, 3 numerical failure).
int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);

}  // namespace snet
