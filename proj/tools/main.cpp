#include <iostream>
#include <string>
#include <vector>

#include "e2kd/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return e2kd::cli::run(args, std::cout, std::cerr);
}
