#include <iostream>
#include <string>
#include <vector>

#include "mctg/harness.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mctg::run_cli(args, std::cout, std::cerr);
}
