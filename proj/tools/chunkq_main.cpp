#include "chunkq/cli.hpp"

int main(int argc, char** argv) { return chunkq::cli::run_cli(argc, argv); }
