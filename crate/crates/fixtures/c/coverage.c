#include <stdio.h>
#include <string.h>

/* Ten single-branch functions. Each if/else compiles to one conditional
 * jump whose taken and fallthrough targets are reachable only through it. */
volatile int sink;

#define BRANCH(n)                                  \
    __attribute__((noinline)) void br##n(int x) {  \
        if (x) {                                   \
            sink += n + 1;                         \
            puts("br" #n " then");                 \
        } else {                                   \
            sink -= n + 1;                         \
            puts("br" #n " else");                 \
        }                                          \
    }

BRANCH(0)
BRANCH(1)
BRANCH(2)
BRANCH(3)
BRANCH(4)
BRANCH(5)
BRANCH(6)
BRANCH(7)
BRANCH(8)
BRANCH(9)

static void (*const branches[10])(int) = {br0, br1, br2, br3, br4,
                                          br5, br6, br7, br8, br9};

/* usage: coverage <pattern>, pattern char i in {'1','0','-'} drives br<i> */
int main(int argc, char **argv) {
    const char *pattern = argc > 1 ? argv[1] : "";
    size_t len = strlen(pattern);
    for (size_t i = 0; i < 10 && i < len; i++) {
        if (pattern[i] == '-')
            continue;
        branches[i](pattern[i] == '1');
    }
    return 0;
}
