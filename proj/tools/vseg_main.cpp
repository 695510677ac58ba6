#include "vseg/cli.hpp"

int main(int argc, char** argv) { return vseg::run_cli(argc, argv); }
