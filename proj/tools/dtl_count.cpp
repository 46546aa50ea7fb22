#include "dtlc/cli.hpp"

int main(int argc, char** argv) { return dtlc::run_cli(argc, argv); }
