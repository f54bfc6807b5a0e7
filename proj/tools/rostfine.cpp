#include "rostfine/cli.hpp"

int main(int argc, char** argv) { return rostfine::cli::run(argc, argv); }
