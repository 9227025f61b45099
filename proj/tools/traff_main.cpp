#include <string>
#include <vector>

#include "traff/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return traff::run_cli(args);
}
