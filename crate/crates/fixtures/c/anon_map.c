#include <stdio.h>
#include <sys/mman.h>

int main(void) {
    void *p = mmap((void *)0x200000000, 8192, PROT_READ,
                   MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
    printf("%p\n", p);
    return 0;
}
