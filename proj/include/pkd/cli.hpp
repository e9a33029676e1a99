#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pkd {

/// Runs one `pkd` command line. `args` excludes the program name. Results go
/// to `out`; diagnostics go to `err` as a single line. Returns the exit status.
int cmd_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pkd
