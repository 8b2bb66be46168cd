#include "ccat/cli.hpp"

int main(int argc, char** argv) { return ccat::cli_main(argc, argv); }
