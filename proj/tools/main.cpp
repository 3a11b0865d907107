#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) { return crf_refine::cli::run(argc, argv, std::cout, std::cerr); }
