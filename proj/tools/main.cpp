#include <iostream>
#include <string>
#include <vector>

#include "xdrec/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return xdrec::run_cli(args, std::cout, std::cerr);
}
