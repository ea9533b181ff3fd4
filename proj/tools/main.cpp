#include <cstdio>

int main() {
    std::puts("snakekit: CLI not wired yet");
    return 0;
}
