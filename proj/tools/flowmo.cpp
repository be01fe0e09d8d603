#include "flowmo/cli.hpp"

int main(int argc, char** argv) { return flowmo::cli::run(argc, argv); }
