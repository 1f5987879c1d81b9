#pragma once
// Command-line front end: one subcommand per pipeline operation, a uniform
// `--key value` override grammar over the configuration table, and exit-code
// mapping (0 success, 1 runtime failure, 2 usage).

#include <iosfwd>
#include <string>
#include <vector>

namespace cxrgen {

// Runs `args` (argv without the program name) and returns the process exit
// code. All normal output goes to `out`, diagnostics to `err`; nothing is
// printed to the real stdout/stderr directly, so tests can run in-process.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cxrgen
