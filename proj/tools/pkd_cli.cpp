#include <iostream>
#include <string>
#include <vector>

#include "pkd/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return pkd::cmd_dispatch(args, std::cout, std::cerr);
}
