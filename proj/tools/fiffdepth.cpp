#include "fiffdepth/cli.hpp"

int main(int argc, char** argv) { return fiffdepth::run_cli(argc, argv); }
