#include <stdio.h>
#include <stdlib.h>

volatile long total;

__attribute__((noinline)) void f(int i) {
    total += i;
}

__attribute__((noinline)) void nops(void) {
    __asm__ volatile(
        ".globl nop_site\n"
        "nop_site:\n"
        "nop\n"
        "nop\n"
        "nop\n");
}

int main(int argc, char **argv) {
    int n = argc > 1 ? atoi(argv[1]) : 1000;
    nops();
    for (int i = 0; i < n; i++) {
        f(i);
        printf("iter %d total %ld\n", i, total);
    }
    return 0;
}
