#include <iostream>

#include "fqt/cli.hpp"

int main(int argc, char** argv) { return fqt::cli::run_cli(argc, argv, std::cout, std::cerr); }
