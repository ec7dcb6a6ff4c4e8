// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace surgeon {

// Runs one CLI invocation (argv without the program name). Returns the
// process exit code: 0 success, 2 configuration error, 3 runtime failure.
int run_cli(const std::vector<std::string>& args);

}  // namespace surgeon
