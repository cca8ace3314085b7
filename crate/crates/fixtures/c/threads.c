#include <pthread.h>
#include <stdio.h>
#include <stdlib.h>

/* usage: threads <nthreads> <iterations> <writer_index> */
volatile long counter;
volatile long watched;
static int iterations = 1;
static int writer = -1;
static pthread_mutex_t lock = PTHREAD_MUTEX_INITIALIZER;

__attribute__((noinline)) void shared_fn(long id) {
    pthread_mutex_lock(&lock);
    counter += id + 1;
    pthread_mutex_unlock(&lock);
}

__attribute__((noinline)) void write_watched(long id) {
    watched = id + 100;
}

static void *worker(void *arg) {
    long id = (long)arg;
    for (int i = 0; i < iterations; i++)
        shared_fn(id);
    if (id == writer)
        write_watched(id);
    return NULL;
}

int main(int argc, char **argv) {
    int n = argc > 1 ? atoi(argv[1]) : 4;
    iterations = argc > 2 ? atoi(argv[2]) : 1;
    writer = argc > 3 ? atoi(argv[3]) : -1;
    pthread_t tids[64];
    for (long i = 0; i < n; i++)
        pthread_create(&tids[i], NULL, worker, (void *)i);
    for (int i = 0; i < n; i++)
        pthread_join(tids[i], NULL);
    printf("counter %ld watched %ld\n", counter, watched);
    return 0;
}
