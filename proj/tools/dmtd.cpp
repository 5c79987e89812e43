#include <iostream>

#include "dmtd/cli.hpp"

int main(int argc, char** argv) { return dmtd::run_cli(argc, argv, std::cout, std::cerr); }
