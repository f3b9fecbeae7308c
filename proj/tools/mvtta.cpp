#include "mvtta/cli.hpp"

int main(int argc, char **argv) { return mvtta::cli::main(argc, argv); }
