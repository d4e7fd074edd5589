#pragma once

// Command-line front end. `cli_main` is the whole program (the binary's main
// just forwards), which lets tests drive commands in-process.
//
// Subcommands: condense, eval, coreset, nas, inspect.
// Exit codes: 0 success, 1 internal/numeric failure, 2 usage/config error.

#include <string>
#include <vector>

namespace dc {

int cli_main(const std::vector<std::string>& args);

} // namespace dc
