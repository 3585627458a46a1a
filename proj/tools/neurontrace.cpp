#include "neurontrace/cli.hpp"

int main(int argc, char** argv) { return neurontrace::run_cli(argc, argv); }
