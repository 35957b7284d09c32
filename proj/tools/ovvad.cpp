#include <iostream>

#include "ovvad/cli.hpp"

int main(int argc, char** argv) { return ovvad::cli::run(argc, argv, std::cout, std::cerr); }
