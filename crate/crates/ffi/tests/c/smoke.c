#include <math.h>
#include <stdio.h>
#include <string.h>

#include "pepsi.h"

#define N 200
#define P 2

static double unif(unsigned *state) {
    *state = *state * 1103515245u + 12345u;
    return ((*state >> 8) & 0xffff) / 65536.0;
}

int main(void) {
    double y[N], x[N * P], s[N];
    unsigned state = 7;
    for (int i = 0; i < N; i++) {
        double x1 = unif(&state) - 0.5, x2 = unif(&state) - 0.5;
        double e = unif(&state) + unif(&state) + unif(&state) - 1.5;
        x[i * P] = x1;
        x[i * P + 1] = x2;
        y[i] = 1.0 + 2.0 * x1 - x2 + e;
        s[i] = x1 + 0.8 * e + 0.3 * (unif(&state) - 0.5);
    }

    PepsiProblem *prob = NULL;
    if (pepsi_problem_new(y, x, N, P, PEPSI_FAMILY_LINEAR, &prob) != PEPSI_STATUS_OK) {
        fprintf(stderr, "problem_new: %s\n", pepsi_last_error());
        return 1;
    }
    if (pepsi_problem_add_secondary(prob, s, PEPSI_FAMILY_LINEAR, true) != PEPSI_STATUS_OK) {
        fprintf(stderr, "add_secondary: %s\n", pepsi_last_error());
        return 1;
    }
    PepsiFit *fit = NULL;
    if (pepsi_fit(prob, PEPSI_METHOD_PEPSI, 0.95, &fit) != PEPSI_STATUS_OK) {
        fprintf(stderr, "fit: %s\n", pepsi_last_error());
        return 1;
    }
    size_t dim = 0;
    pepsi_fit_dim(fit, &dim);
    double est[3], se[3];
    if (dim != 3 || pepsi_fit_coefficients(fit, est, se, NULL, NULL, NULL, 3) != PEPSI_STATUS_OK) {
        fprintf(stderr, "coefficients\n");
        return 1;
    }
    for (size_t k = 0; k < dim; k++) {
        printf("%.17g %.17g\n", est[k], se[k]);
    }
    pepsi_fit_free(fit);

    if (pepsi_fit(prob, 42, 0.95, &fit) != PEPSI_STATUS_INVALID_INPUT || fit != NULL
        || strstr(pepsi_last_error(), "method") == NULL) {
        fprintf(stderr, "expected invalid method\n");
        return 1;
    }
    pepsi_problem_free(prob);
    printf("version %s\n", pepsi_version());
    return 0;
}
