#include "cli.hpp"

int main(int argc, char** argv) { return gradleak::cli::cli_main(argc, argv); }
