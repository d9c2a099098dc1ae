#pragma once

#include "vitlens/error.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace vitlens {

// Process exit codes of the command line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;       // unexpected internal error
inline constexpr int kExitUsage = 2;         // bad flags or arguments
inline constexpr int kExitInput = 3;         // malformed or invalid input data
inline constexpr int kExitCompatibility = 4; // dimension, shape, version or vocabulary conflicts
inline constexpr int kExitIo = 5;            // missing files, unknown ids, I/O failures

int exit_code(ErrorCode code);

// Runs `vitlens <args...>` (args exclude the program name). Results go to
// `out` (or the -o file); failures print {"error": {code, message}} to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Port of the server started by `serve` in this process, 0 when none runs.
int serving_port();
// Stops that server; `serve` then returns 0.
void stop_serving();

} // namespace vitlens
