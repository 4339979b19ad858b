/* Build: cargo build -p liqlab-ffi --release
 *        cc -Icrates/ffi/include crates/ffi/examples/simulate.c target/release/libliqlab_ffi.a -lpthread -ldl -lm */
#include <stdio.h>
#include <stdlib.h>
#include "liqlab.h"
int main(void) {
    LiqlabConfig *cfg = NULL;
    if (liqlab_config_new(&cfg) != LIQLAB_STATUS_OK) return 1;
    liqlab_config_set(cfg, "n_paths=8");
    liqlab_config_set(cfg, "grid.n_steps=4");
    liqlab_config_set(cfg, "lambda_impact=2");
    if (liqlab_config_validate(cfg, "simulate") != LIQLAB_STATUS_INVALID_ARGUMENT) return 3;
    printf("error: %s\n", liqlab_last_error());
    liqlab_config_set(cfg, "lambda_impact=1");
    LiqlabPaths *paths = NULL;
    if (liqlab_simulate(cfg, &paths) != LIQLAB_STATUS_OK) { printf("%s\n", liqlab_last_error()); return 4; }
    size_t nodes, n;
    liqlab_paths_shape(paths, &nodes, &n);
    double *s = malloc(sizeof(double) * nodes * n);
    liqlab_paths_copy(paths, LIQLAB_FIELD_S, s, nodes * n);
    printf("%s: %zu x %zu, S[0,0]=%g S[T,0]=%g\n", liqlab_version(), nodes, n, s[0], s[(nodes - 1) * n]);
    double g;
    liqlab_swap_price(cfg, 1, 0.0, 0.02, 0.02, 0.0, &g);
    printf("G1_0 = %.6f\n", g);
    free(s);
    liqlab_paths_free(paths);
    liqlab_config_free(cfg);
    return 0;
}
