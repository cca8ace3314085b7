#include <fcntl.h>
#include <sys/syscall.h>
#include <unistd.h>

/* A fixed script of 50 raw syscalls with known outcomes. */
int main(void) {
    static const char msg[] = "script\n";
    for (int round = 0; round < 5; round++) {
        syscall(SYS_getpid);
        syscall(SYS_getppid);
        syscall(SYS_getuid);
        syscall(SYS_getgid);
        syscall(SYS_close, 1000 + round);
        syscall(SYS_write, 1, msg, sizeof msg - 1);
        syscall(SYS_dup, 1000);
        syscall(SYS_geteuid);
        syscall(SYS_getegid);
        syscall(SYS_lseek, 1000, 0, 0);
    }
    return 0;
}
