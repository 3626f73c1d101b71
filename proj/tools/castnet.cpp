#include "castnet/cli.hpp"

int main(int argc, char** argv) { return castnet::cli::run(argc, argv); }
