#pragma once

#include <string>
#include <vector>

namespace invmat {

// Runs one command with the given arguments (program name excluded) and
// returns the process exit code: 0 success, 1 usage, 2 validation or io,
// 3 numerical failure. Callable in-process.
int cli_dispatch(const std::vector<std::string>& args);

}  // namespace invmat
