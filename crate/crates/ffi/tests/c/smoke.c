#include <math.h>
#include <stdio.h>
#include <string.h>

#include "cofuse.h"

static const char *SMALL =
    "{\"grid\":{\"h\":16,\"w\":16,\"cell_m\":2.0,\"channels\":4},\"state_dim\":4,\"buffer\":2,"
    "\"training\":{\"steps\":2},\"evaluation\":{\"scenarios\":1,\"ticks\":2}}";

#define CHECK(cond)                                              \
    do {                                                         \
        if (!(cond)) {                                           \
            fprintf(stderr, "check failed: %s (line %d)\n", #cond, __LINE__); \
            return 1;                                            \
        }                                                        \
    } while (0)

int main(void) {
    CofuseModel *model = NULL;
    CHECK(cofuse_model_new(SMALL, 3, &model) == COFUSE_STATUS_OK);
    CHECK(cofuse_model_num_values(model) > 0);

    CofuseMetrics m;
    CHECK(cofuse_evaluate(model, &m) == COFUSE_STATUS_OK);
    CHECK(m.iou >= 0.0 && m.iou <= 1.0);
    CHECK(m.ticks == 2);
    cofuse_model_free(model);

    CHECK(cofuse_model_new("{\"retention\": 2.0}", 0, &model) == COFUSE_STATUS_CONFIG);
    CHECK(cofuse_last_error() != NULL && strlen(cofuse_last_error()) > 0);
    CHECK(cofuse_evaluate(NULL, &m) == COFUSE_STATUS_NULL_POINTER);

    double x[2 * 4 * 6], bands[2 * 4 * 6], back[2 * 4 * 6];
    for (size_t i = 0; i < sizeof x / sizeof x[0]; i++) {
        x[i] = sin(0.7 * (double)i) + 0.1 * (double)i;
    }
    CHECK(cofuse_haar_forward(x, 2, 4, 6, bands) == COFUSE_STATUS_OK);
    CHECK(cofuse_haar_inverse(bands, 2, 4, 6, back) == COFUSE_STATUS_OK);
    for (size_t i = 0; i < sizeof x / sizeof x[0]; i++) {
        CHECK(fabs(back[i] - x[i]) < 1e-12);
    }
    CHECK(cofuse_haar_forward(x, 2, 3, 6, bands) == COFUSE_STATUS_INVALID_ARGUMENT);

    puts("ok");
    return 0;
}
