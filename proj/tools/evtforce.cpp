#include <iostream>
#include <string>
#include <vector>

#include "evtforce/pipeline.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return evtforce::cli::run(args, std::cout, std::cerr);
}
