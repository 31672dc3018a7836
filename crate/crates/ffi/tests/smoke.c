#include "devfp.h"
#include <stdio.h>

int main(void) {
    char id[64];
    size_t needed = 0;
    if (devfp_zoo_len() != 30) return 1;
    if (devfp_zoo_config(0, id, sizeof id, &needed) != DEVFP_STATUS_OK) return 2;
    float seq = 0.0f, pw = 0.0f;
    float v[1000];
    for (int i = 0; i < 1000; i++) v[i] = 0.1f;
    if (devfp_reduce(v, 1000, DEVFP_REDUCTION_SEQUENTIAL, 0, &seq) != DEVFP_STATUS_OK) return 3;
    if (devfp_reduce(v, 1000, DEVFP_REDUCTION_PAIRWISE, 0, &pw) != DEVFP_STATUS_OK) return 4;
    DevfpSystem *sys = NULL;
    if (devfp_system_new("nope", 42, 0.0f, &sys) != DEVFP_STATUS_UNKNOWN_CONFIG || sys != NULL) return 5;
    char err[128];
    devfp_last_error(err, sizeof err);
    if (devfp_system_new(id, 42, 0.0f, &sys) != DEVFP_STATUS_OK) return 6;
    devfp_system_free(sys);
    printf("%s %zu %.6f %.6f %s\n", id, needed, seq, pw, err);
    return 0;
}
