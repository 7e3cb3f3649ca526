#include "causalgaze/cli.hpp"

int main(int argc, char** argv) { return causalgaze::cli::run(argc, argv); }
