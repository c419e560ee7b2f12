#include "poemkit/cli.hpp"

int main(int argc, char** argv) { return poemkit::cli::run(argc, argv); }
