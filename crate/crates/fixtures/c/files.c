#include <errno.h>
#include <fcntl.h>
#include <stdio.h>
#include <string.h>
#include <sys/mman.h>
#include <unistd.h>

#define PROBE_LEN (1 << 20) + 4096

/* usage: files read <path>     print the file or the open failure
 *        files create <path>   create the file
 *        files probe           three anonymous allocations of PROBE_LEN */
int main(int argc, char **argv) {
    const char *mode = argc > 1 ? argv[1] : "read";
    if (!strcmp(mode, "probe")) {
        for (int i = 0; i < 3; i++) {
            void *p = mmap(NULL, PROBE_LEN, PROT_READ | PROT_WRITE,
                           MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
            if (p == MAP_FAILED)
                printf("alloc %d failed: %s\n", i, strerror(errno));
            else
                printf("alloc %d ok\n", i);
        }
        return 0;
    }
    const char *path = argc > 2 ? argv[2] : "config.txt";
    if (!strcmp(mode, "create")) {
        int fd = open(path, O_CREAT | O_WRONLY, 0644);
        printf("create returned %d\n", fd);
        return 0;
    }
    int fd = open(path, O_RDONLY);
    if (fd < 0) {
        printf("open failed: %s\n", strerror(errno));
        return 2;
    }
    char buf[256];
    ssize_t n = read(fd, buf, sizeof buf - 1);
    buf[n > 0 ? n : 0] = 0;
    printf("config: %s\n", buf);
    return 0;
}
