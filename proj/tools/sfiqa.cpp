#include <iostream>

#include "sfiqa/cli.hpp"

int main(int argc, char** argv) { return sfiqa::cli::run(argc, argv, std::cout, std::cerr); }
