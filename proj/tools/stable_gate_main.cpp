#include <string>
#include <vector>

#include "stable/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return stable::cli::cli_run(args);
}
