#include "diffolio/cli.hpp"

int main(int argc, char** argv) { return diffolio::cli::run_command(argc, argv); }
