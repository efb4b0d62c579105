#include "lmkit/cli.hpp"

int main(int argc, char** argv) { return lmkit::run_cli(argc, argv); }
