#include <iostream>

#include "hvm/cli.hpp"

int main(int argc, char** argv) { return hvm::run_cli(argc, argv, std::cout, std::cerr); }
