#include <stdio.h>
#include <unistd.h>

__attribute__((noinline)) void vuln(void) {
    char buf[64];
    read(0, buf, 512);
}

__attribute__((noinline)) void handle_request(void) {
    vuln();
    puts("request handled");
}

int main(void) {
    handle_request();
    return 0;
}
