#include <iostream>

#include "shiftcnn/cli.hpp"

int main(int argc, char** argv) {
  return shiftcnn::cli::run_cli(argc, argv, std::cout, std::cerr);
}
