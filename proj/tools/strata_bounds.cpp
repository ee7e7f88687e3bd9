#include "strata_bounds/cli.hpp"

int main(int argc, char** argv) { return strata_bounds::cli::run(argc, argv); }
