#include <math.h>
#include <stdio.h>

#include "gmfm.h"

int main(void) {
    enum { P1 = 6, P2 = 5, T = 8 };
    double x[P1 * P2 * T];
    for (int t = 0; t < T; t++)
        for (int i = 0; i < P1; i++)
            for (int j = 0; j < P2; j++)
                x[(t * P1 + i) * P2 + j] = (1.0 + 0.1 * i) * (0.5 + 0.2 * j) * sin(1.0 + t) + 0.01 * ((i * 7 + j * 3 + t) % 5);

    GmfmData *data = NULL;
    if (gmfm_data_new(P1, P2, T, x, GMFM_FAMILY_GAUSSIAN, &data) != GMFM_STATUS_OK) {
        fprintf(stderr, "%s\n", gmfm_last_error());
        return 1;
    }
    GmfmFitOptions opts = gmfm_fit_options_default();
    opts.restarts = 1;
    GmfmFit *fit = NULL;
    if (gmfm_fit(data, 1, 1, &opts, &fit) != GMFM_STATUS_OK) {
        fprintf(stderr, "%s\n", gmfm_last_error());
        return 1;
    }
    size_t p1, p2, t, k1, k2;
    gmfm_fit_dims(fit, &p1, &p2, &t, &k1, &k2);
    double r[P1];
    size_t len = P1;
    if (gmfm_fit_row_loadings(fit, r, &len) != GMFM_STATUS_OK || len != P1)
        return 1;
    double ll;
    gmfm_fit_loglik(fit, &ll);
    if (!(ll <= 0.0))
        return 1;
    gmfm_fit_free(fit);
    gmfm_data_free(data);
    printf("ok k1=%zu k2=%zu\n", k1, k2);
    return 0;
}
