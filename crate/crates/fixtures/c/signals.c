#include <signal.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <unistd.h>

static volatile sig_atomic_t received;

static void on_usr2(int sig) {
    (void)sig;
    received++;
}

/* usage: signals ill | usr1 | count <n> | wait */
int main(int argc, char **argv) {
    const char *mode = argc > 1 ? argv[1] : "usr1";
    if (!strcmp(mode, "ill")) {
        __builtin_trap();
    } else if (!strcmp(mode, "usr1")) {
        raise(SIGUSR1);
        printf("survived\n");
    } else if (!strcmp(mode, "count")) {
        int n = argc > 2 ? atoi(argv[2]) : 5;
        signal(SIGUSR2, on_usr2);
        for (int i = 0; i < n; i++)
            raise(SIGUSR2);
        printf("received %d\n", (int)received);
    } else if (!strcmp(mode, "wait")) {
        for (int i = 0; i < 100; i++)
            usleep(10000);
        printf("done\n");
    }
    return 0;
}
