#include <stdio.h>
#include <stdlib.h>

#include "reppl.h"

#define CHECK(call)                                                       \
    do {                                                                  \
        RepplStatus s_ = (call);                                          \
        if (s_ != REPPL_STATUS_OK) {                                      \
            fprintf(stderr, "%s: %d %s\n", #call, (int)s_,                \
                    reppl_last_error_message());                          \
            return 1;                                                     \
        }                                                                 \
    } while (0)

int main(void) {
    RepplDataset *ds = NULL;
    RepplConfig cfg;
    size_t n = 0, len = 0;
    CHECK(reppl_config_default(&cfg));
    cfg.pool = REPPL_POOL_ROLL;
    CHECK(reppl_dataset_fixture(&ds));
    CHECK(reppl_dataset_len(ds, &n));

    double *scores = malloc(n * sizeof(double));
    uint8_t *labels = malloc(n);
    CHECK(reppl_score_dataset(ds, &cfg, scores, n, &len));
    for (size_t i = 0; i < n; i++) {
        scores[i] = -scores[i];
        labels[i] = (uint8_t)(i % 2);
    }

    RepplEvalResult eval;
    CHECK(reppl_evaluate(scores, labels, n, &eval));
    printf("version %s\n", reppl_version());
    printf("examples %zu\n", n);
    printf("auc %f\n", eval.auc);

    RepplScore *score = NULL;
    if (reppl_score_example(ds, n, &cfg, &score) != REPPL_STATUS_OUT_OF_RANGE) return 1;
    printf("error %s\n", reppl_last_error_message());

    free(scores);
    free(labels);
    reppl_dataset_free(ds);
    return 0;
}
