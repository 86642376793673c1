/* Fixed-seed integer workload: prints its metrics as JSON on the last line. */
#include <stdio.h>
#include <stdlib.h>
#include <time.h>

static double now(void)
{
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return ts.tv_sec + ts.tv_nsec * 1e-9;
}

int main(int argc, char **argv)
{
    long long n = argc > 1 ? atoll(argv[1]) : 10000000LL;
    if (n <= 0) {
        fprintf(stderr, "iterations must be positive\n");
        return 1;
    }

    unsigned long long x = 0x2545F4914F6CDD1DULL;
    unsigned long long acc = 0;
    double t0 = now();
    for (long long i = 0; i < n; i++) {
        x = x * 6364136223846793005ULL + 1442695040888963407ULL;
        acc ^= x >> 29;
        acc = (acc << 7) | (acc >> 57);
    }
    double dt = now() - t0;
    if (dt <= 0)
        dt = 1e-9;

    printf("hello-bench: %lld iterations\n", n);
    printf("{\"checksum\":\"%016llx\",\"ops\":%lld,\"mops\":%.3f}\n", acc, n, n / dt / 1e6);
    return 0;
}
