#include <iostream>

#include "csmx/cli.h"

int main(int argc, char** argv) {
  return csmx::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
