#include <pthread.h>
#include <stdio.h>
#include <stdlib.h>
#include <unistd.h>

static void *idle(void *arg) {
    (void)arg;
    for (;;)
        pause();
    return NULL;
}

/* usage: sleeper [extra_threads] */
int main(int argc, char **argv) {
    int extra = argc > 1 ? atoi(argv[1]) : 0;
    pthread_t t;
    for (int i = 0; i < extra; i++)
        pthread_create(&t, NULL, idle, NULL);
    printf("ready\n");
    fflush(stdout);
    for (;;)
        sleep(1);
}
