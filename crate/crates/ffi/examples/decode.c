/* Greedy and speculative decoding of a checkpoint from C.
 *
 *   cargo build -p blockffn-ffi --release
 *   cc -Icrates/ffi/include crates/ffi/examples/decode.c \
 *      target/release/libblockffn_ffi.a -lm -lpthread -ldl -o decode
 *   ./decode runs/train/final.bffn "fn main"
 */
#include <stdio.h>
#include <string.h>

#include "blockffn.h"

int main(int argc, char **argv) {
    if (argc < 3) {
        fprintf(stderr, "usage: %s CHECKPOINT PROMPT\n", argv[0]);
        return 2;
    }
    BffnModel *model = NULL;
    if (bffn_model_load(argv[1], &model) != BFFN_STATUS_OK) {
        fprintf(stderr, "load: %s\n", bffn_last_error_message());
        return 1;
    }
    uint32_t prompt[256];
    size_t prompt_len = strlen(argv[2]);
    if (prompt_len > 256) prompt_len = 256;
    for (size_t i = 0; i < prompt_len; i++) prompt[i] = (unsigned char)argv[2][i];

    uint32_t out[64];
    size_t len = 0;
    BffnDecodeStats stats;
    BffnStatus st = bffn_spec_decode(model, BFFN_DRAFT_POLICY_SELF_GREEDY, 4, 4, 0, NULL, 0, prompt,
                                     prompt_len, 32, out, 64, &len, &stats);
    if (st != BFFN_STATUS_OK) {
        fprintf(stderr, "decode (%d): %s\n", (int)st, bffn_last_error_message());
        bffn_model_free(model);
        return 1;
    }
    for (size_t i = 0; i < len; i++) putchar(out[i] < 128 ? (int)out[i] : '?');
    printf("\nsteps %zu, mean accepted %.2f, bytes/token %.0f (dense %llu)\n", stats.steps,
           stats.mean_accepted, (double)stats.counted_ffn_bytes / (double)stats.tokens_generated,
           (unsigned long long)stats.dense_ar_bytes_per_token);
    bffn_model_free(model);
    return 0;
}
