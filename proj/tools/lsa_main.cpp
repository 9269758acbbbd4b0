#include <iostream>

#include "lsa/cli.hpp"

int main(int argc, char** argv) { return lsa::cli::run(argc, argv, std::cout, std::cerr); }
