#include "btlab/cli.hpp"

int main(int argc, char** argv) {
    return btlab::harness::run_cli(argc, argv);
}
