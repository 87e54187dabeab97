#include "kiunet/cli.hpp"

int main(int argc, char** argv) { return kiunet::cli::run(argc, argv); }
