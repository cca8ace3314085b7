#include <stdio.h>

volatile int depth;

__attribute__((noinline)) void c(void) {
    depth = 3;
    __asm__ volatile("nop");
}

__attribute__((noinline)) void b(void) {
    depth = 2;
    c();
}

__attribute__((noinline)) void a(void) {
    depth = 1;
    b();
}

int main(void) {
    a();
    printf("depth %d\n", depth);
    return 0;
}
