#include "patchlm/cli.hpp"

int main(int argc, char** argv) { return patchlm::cli::run(argc, argv); }
