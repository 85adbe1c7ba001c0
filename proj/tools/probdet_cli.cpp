#include "probdet/cli.hpp"

int main(int argc, char** argv) { return probdet::cli::run(argc, argv); }
