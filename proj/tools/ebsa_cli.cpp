#include "ebsa/commands.hpp"

int main(int argc, char** argv) { return ebsa::cli::run(argc, argv); }
