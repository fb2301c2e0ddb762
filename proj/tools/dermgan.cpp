#include <string>
#include <vector>

#include "dermgan/cli.hpp"

int main(int argc, char** argv) { return dermgan::run_command(std::vector<std::string>(argv + 1, argv + argc)); }
