#include <cstdio>

int main() {
    std::puts("bivit cli placeholder");
    return 0;
}
