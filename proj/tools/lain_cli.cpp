#include "lain/cli.hpp"

int main(int argc, char** argv) { return lain::run_cli(argc, argv); }
