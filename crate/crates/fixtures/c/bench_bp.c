#include <stdlib.h>

volatile long acc;

__attribute__((noinline)) void target_fn(long i) {
    acc += i;
}

/* usage: bench_bp <events> */
int main(int argc, char **argv) {
    long n = argc > 1 ? atol(argv[1]) : 1000;
    for (long i = 0; i < n; i++)
        target_fn(i);
    return 0;
}
