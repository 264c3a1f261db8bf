#include <string>
#include <vector>

#include "masker/cli.hpp"

int main(int argc, char** argv) {
    return masker::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
