#include "mixlab/cli.hpp"

int main(int argc, char** argv) { return mixlab::run_cli(argc, argv); }
