// CLI entry point; subcommands are registered in cli.hpp as the pipeline
// modules come online.
#include <cstdio>

int main(int argc, char** argv) {
    (void)argc;
    (void)argv;
    std::fprintf(stderr, "neurocarve: no subcommands wired yet\n");
    return 1;
}
