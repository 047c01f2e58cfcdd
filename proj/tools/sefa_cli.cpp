#include "sefa/cli.hpp"

int main(int argc, char** argv) { return sefa::cli::run(argc, argv); }
