#include "trajprune/cli.hpp"

int main(int argc, char** argv) { return trajprune::run_cli(argc, argv); }
