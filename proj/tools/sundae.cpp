#include <iostream>
#include <string>
#include <vector>

#include "sundae/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return sundae::cli::run(args, std::cout, std::cerr);
}
