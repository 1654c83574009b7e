#include "cli.hpp"

int main(int argc, char** argv) { return memechain::cli::run_cli(argc, argv); }
