#include <iostream>

#include "capgen/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return capgen::run_cli(args, std::cout, std::cerr);
}
