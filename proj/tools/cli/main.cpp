#include "commands.hpp"

int main(int argc, char** argv) { return pertrace::cli::run(argc, argv); }
