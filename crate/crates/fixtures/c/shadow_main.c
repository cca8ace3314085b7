#include <stdio.h>

int lib_entry(int x);

__attribute__((noinline)) int f(int x) {
    return x + 7;
}

int main(void) {
    printf("%d %d\n", f(1), lib_entry(2));
    return 0;
}
