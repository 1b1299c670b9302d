#include <iostream>

#include "hbasin/cli.hpp"

int main(int argc, char** argv) { return hbasin::cli::run(argc, argv, std::cout, std::cerr); }
