#include <iostream>

#include "petformer/cli.hpp"

int main(int argc, char** argv) { return petformer::cli::run(argc, argv, std::cout, std::cerr); }
