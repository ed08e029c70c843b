#include "josa/cli.hpp"

int main(int argc, char **argv) { return josa::run_cli(argc, argv); }
