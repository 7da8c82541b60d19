#include "evgen/cli.hpp"

int main(int argc, char** argv) { return evgen::cli::dispatch(argc, argv); }
