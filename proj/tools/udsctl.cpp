#include "uds/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return uds::cli::run_cli(argc, argv, std::cout, std::cerr); }
