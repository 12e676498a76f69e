#include <cstdlib>
#include <iostream>

#include "cli_app.hpp"

int main(int argc, char** argv) {
  return strategem::cli::run(argc, argv, std::cout, std::cerr, std::getenv("STRATEGEM_SEED"));
}
