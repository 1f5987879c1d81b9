#include <iostream>
#include <string>
#include <vector>

#include "cxrgen/cli.hpp"

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv + 1, argv + argc);
    return cxrgen::dispatch(args, std::cout, std::cerr);
}
