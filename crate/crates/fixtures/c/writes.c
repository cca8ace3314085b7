#include <stdlib.h>
#include <unistd.h>

/* usage: writes <count>; issues exactly <count> write(1, "hi", 2) calls */
int main(int argc, char **argv) {
    int n = argc > 1 ? atoi(argv[1]) : 1000;
    for (int i = 0; i < n; i++)
        write(1, "hi", 2);
    return 0;
}
