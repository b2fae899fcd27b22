#include "cli.hpp"

int main(int argc, char** argv) { return lcnn::cli::run(argc, argv); }
