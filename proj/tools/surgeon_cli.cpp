// SPDX-License-Identifier: Apache-2.0
#include <string>
#include <vector>

#include "surgeon/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return surgeon::run_cli(args);
}
