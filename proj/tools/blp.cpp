#include "blp/cli.hpp"

int main(int argc, char** argv) { return blp::cli::run(argc, argv); }
