#include "gliocal/cli.hpp"

int main(int argc, char** argv) { return gliocal::run_cli(argc, argv); }
