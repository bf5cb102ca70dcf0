#include "fusionprobe/commands.hpp"

int main(int argc, char** argv) { return fprobe::run_cli(argc, argv); }
