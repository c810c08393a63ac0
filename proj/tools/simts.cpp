#include "simts/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return simts::cli::run(argc, argv, std::cout, std::cerr); }
