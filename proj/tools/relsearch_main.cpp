#include "commands.hpp"

int main(int argc, char** argv) { return relsearch::cli::run(argc, argv); }
