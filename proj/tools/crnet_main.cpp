#include "crnet/cli.hpp"

int main(int argc, char** argv) { return crnet::cli_main(argc, argv); }
