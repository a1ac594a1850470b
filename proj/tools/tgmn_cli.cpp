// Placeholder entry point; real subcommands land with the experiment layer.
#include <cstdio>

int main() {
    std::puts("tgmn: no subcommands wired yet");
    return 1;
}
