#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "hvpp.h"

#define W 32
#define H 32

static int fail(const char *what, HvppStatus s) {
    fprintf(stderr, "%s: status %d: %s\n", what, (int)s, hvpp_last_error());
    return 1;
}

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke CHECKPOINT\n");
        return 2;
    }
    HvppModel *model = NULL;
    HvppStatus s = hvpp_model_load(argv[1], &model);
    if (s != HVPP_STATUS_OK) return fail("load", s);

    size_t n = W * H * 3 / 2;
    uint8_t *in = malloc(n), *out = malloc(n);
    for (size_t i = 0; i < n; i++) in[i] = (uint8_t)(i * 37 % 251);
    s = hvpp_model_enhance_i420(model, in, out, W, H, 37);
    if (s != HVPP_STATUS_OK) return fail("enhance", s);
    if (memcmp(in, out, n) != 0) {
        fprintf(stderr, "identity model changed the frame\n");
        return 1;
    }

    double p = 0.0;
    s = hvpp_psnr(in, out, W * H, 255.0, &p);
    if (s != HVPP_STATUS_OK || !isinf(p)) return fail("psnr", s);

    double ar[4] = {100, 200, 400, 800}, aq[4] = {30, 33, 36, 39}, tr[4];
    for (int i = 0; i < 4; i++) tr[i] = 2.0 * ar[i];
    double bd = 0.0;
    s = hvpp_bd_rate(ar, aq, 4, tr, aq, 4, &bd);
    if (s != HVPP_STATUS_OK || fabs(bd - 100.0) > 1e-9) return fail("bd_rate", s);

    s = hvpp_model_enhance_i420(model, in, out, W + 1, H, 37);
    if (s != HVPP_STATUS_INVALID_ARGUMENT || strlen(hvpp_last_error()) == 0) return fail("odd size", s);

    hvpp_model_free(model);
    free(in);
    free(out);
    printf("ok %s\n", hvpp_version());
    return 0;
}
