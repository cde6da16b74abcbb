#include "xrac/cli.hpp"

int main(int argc, char** argv) { return xrac::run_cli(argc, argv); }
