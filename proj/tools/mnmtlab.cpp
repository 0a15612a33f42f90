#include "mnmt/cli.hpp"

int main(int argc, char** argv) { return mnmt::cli_main(argc, argv); }
