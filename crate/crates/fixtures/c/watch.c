#include <stdio.h>

volatile long watched;
volatile long other;

__attribute__((noinline)) void writer(void) {
    watched = 42;
}

int main(void) {
    other = 1;
    writer();
    other = watched;
    printf("watched %ld\n", watched);
    return 0;
}
