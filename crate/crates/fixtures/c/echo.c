#include <stdio.h>
#include <string.h>

/* usage: echo            copies stdin lines to stdout until EOF
 *        echo protocol   three question/answer rounds */
int main(int argc, char **argv) {
    char line[256];
    if (argc > 1 && !strcmp(argv[1], "protocol")) {
        for (int round = 1; round <= 3; round++) {
            printf("Q%d?\n", round);
            fflush(stdout);
            if (!fgets(line, sizeof line, stdin))
                return 1;
            line[strcspn(line, "\n")] = 0;
            printf("A%d:%s\n", round, line);
            fflush(stdout);
        }
        return 0;
    }
    while (fgets(line, sizeof line, stdin)) {
        fputs(line, stdout);
        fflush(stdout);
    }
    return 0;
}
