#include <cstdio>
int main() { std::puts("vd: cli not wired yet"); return 1; }
