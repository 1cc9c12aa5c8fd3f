#include "deepimp/cli.hpp"

int main(int argc, char** argv) { return deepimp::cli::run(argc, argv); }
