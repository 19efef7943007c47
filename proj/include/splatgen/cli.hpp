#pragma once

#include <string>
#include <vector>

namespace splatgen {
namespace cli {

// Subcommand dispatcher used by the binary and the CLI tests. Returns the
// process exit code; on failure a machine-readable {"error", "code"} line is
// written to stderr.
int dispatch(const std::vector<std::string>& args);

}  // namespace cli
}  // namespace splatgen
