#include "fashionrag/cli.hpp"

int main(int argc, char** argv) {
    return fashionrag::run_command(std::vector<std::string>(argv + 1, argv + argc));
}
