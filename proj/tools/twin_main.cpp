#include <cstdio>

int main() {
    std::puts("twin: placeholder");
    return 0;
}
