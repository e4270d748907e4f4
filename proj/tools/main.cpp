#include "prefcurate/cli.hpp"

int main(int argc, char** argv) { return prefcurate::cli::run(argc, argv); }
