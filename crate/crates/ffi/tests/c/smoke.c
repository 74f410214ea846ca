#include <math.h>
#include <stdio.h>
#include "te_ffi.h"

/* argv: replicate files... ; exits non-zero on any unexpected result */
int main(int argc, char **argv) {
    TeReplicateSet *set = NULL;
    TeStatus st = te_replicate_set_load((const char *const *)(argv + 1), (size_t)(argc - 1),
                                        "c1", "Corpus 1", 0, &set);
    if (st != TE_STATUS_OK) {
        fprintf(stderr, "load: %d %s\n", st, te_last_error_message());
        return 1;
    }
    size_t m = 0, dim = 0, shared = 0;
    te_replicate_set_info(set, &m, &dim, &shared);
    double ec = -1.0;
    st = te_embedding_confidence(set, "a", 2, &ec);
    double mean = 0.0, sd = -1.0;
    TeStatus st2 = te_pairwise_similarity(set, "a", "a", &mean, &sd);
    TeStatus absent = te_embedding_confidence(set, "zz", 2, &ec);
    const char *msg = te_last_error_message();
    printf("m=%zu dim=%zu shared=%zu ec_status=%d mean=%.17g std=%.17g absent=%d msg=%s\n",
           m, dim, shared, st, mean, sd, absent, msg ? msg : "(null)");
    te_replicate_set_free(set);

    double src[6] = {0, 0, 1, 0, 0, 1}, tgt[6], out[6], rot[4], scale, tr[2], before, after;
    for (int i = 0; i < 3; i++) { /* rotate 90 degrees, scale 2, shift (3, -1) */
        tgt[2 * i] = -2 * src[2 * i + 1] + 3;
        tgt[2 * i + 1] = 2 * src[2 * i] - 1;
    }
    st = te_procrustes_align(src, tgt, 3, out, rot, &scale, tr, &before, &after);
    double err = 0;
    for (int i = 0; i < 6; i++) err = fmax(err, fabs(out[i] - tgt[i]));
    printf("procrustes_status=%d scale=%.12f max_err=%.3g\n", st, scale, err);
    return (st == TE_STATUS_OK && err < 1e-9 && st2 == TE_STATUS_OK) ? 0 : 2;
}
