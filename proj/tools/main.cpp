#include "cli.hpp"

int main(int argc, char** argv) { return geox::cli::run(argc, argv); }
