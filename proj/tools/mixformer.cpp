#include "mixformer/cli.hpp"

int main(int argc, char** argv) { return mixformer::cli::run(argc, argv); }
