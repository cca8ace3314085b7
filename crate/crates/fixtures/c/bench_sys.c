#include <stdlib.h>
#include <sys/syscall.h>
#include <unistd.h>

/* usage: bench_sys <events>; issues exactly <events> getppid syscalls */
int main(int argc, char **argv) {
    long n = argc > 1 ? atol(argv[1]) : 1000;
    for (long i = 0; i < n; i++)
        syscall(SYS_getppid);
    return 0;
}
