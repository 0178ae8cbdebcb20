#include <iostream>

#include "qexplain/cli.hpp"

int main(int argc, char** argv) { return qx::cli_main(argc, argv, std::cout, std::cerr); }
