#include "storm/commands.hpp"

int main(int argc, char** argv) { return storm::run_cli(argc, argv); }
