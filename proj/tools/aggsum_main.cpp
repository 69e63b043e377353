#include <iostream>

#include "aggsum/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return aggsum::cli::run(args, std::cout, std::cerr);
}
