/* Build: cc eval.c -I../include -L../../../target/release -lrio_ffi -o eval */
#include <stdio.h>
#include "rio.h"

int main(int argc, char **argv) {
    if (argc != 3) {
        fprintf(stderr, "usage: %s EST.csv REF.csv\n", argv[0]);
        return 2;
    }
    RioMetrics m;
    RioStatus st = rio_evaluate_files(argv[1], argv[2], 2.0, &m);
    if (st != RIO_STATUS_OK) {
        fprintf(stderr, "error %d: %s\n", (int)st, rio_last_error_message());
        return 1;
    }
    printf("ape %.4f m  end %.4f m  samples %zu\n", m.ape_rmse, m.end_pose_error, m.samples);
    return 0;
}
