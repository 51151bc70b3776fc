#include "memoir/cli.hpp"

int main(int argc, char** argv) { return memoir::cli_main(argc, argv); }
