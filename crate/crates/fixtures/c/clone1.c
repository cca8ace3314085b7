#include <pthread.h>
#include <stdio.h>
#include <unistd.h>

static void *child(void *arg) {
    (void)arg;
    syscall(39);
    return NULL;
}

int main(void) {
    pthread_t t;
    pthread_create(&t, NULL, child, NULL);
    pthread_join(t, NULL);
    return 0;
}
