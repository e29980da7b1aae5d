/*
 * Minimal consumer of the newslab C API. Build from the repository root:
 *
 *   cargo build -p newslab-ffi
 *   cc -std=c99 -Icrates/ffi/include crates/ffi/examples/smoke.c \
 *      target/debug/libnewslab_ffi.a -lpthread -ldl -lm -o smoke
 *   ./smoke [path/to/embeddings.bin]
 *
 * Exits 0 when every call behaves as documented.
 */
#include <newslab.h>

#include <math.h>
#include <stdio.h>
#include <string.h>

static int failures = 0;

static void check(int ok, const char *what) {
    if (!ok) {
        fprintf(stderr, "FAIL: %s (last error: %s)\n", what, nl_last_error());
        failures++;
    }
}

int main(int argc, char **argv) {
    printf("newslab %s\n", nl_version());

    /* nDCG@k of a slate with hits at ranks 1 and 3. */
    const uint8_t labels[] = {1, 0, 1, 0};
    double ndcg = 0.0;
    check(nl_ndcg_at_k(labels, 4, 4, &ndcg) == NL_STATUS_OK, "ndcg status");
    check(ndcg > 0.9 && ndcg < 1.0, "ndcg value");

    /* A slate with no relevant item is degenerate, and the error says so. */
    const uint8_t empty[] = {0, 0};
    check(nl_ndcg_at_k(empty, 2, 2, &ndcg) == NL_STATUS_DEGENERATE, "ndcg degenerate");
    check(strlen(nl_last_error()) > 0, "last error populated");

    /* Jaccard@2 of two rankings sharing one of three distinct ids. */
    const char *ra[] = {"N1", "N2"};
    const char *rb[] = {"N1", "N3"};
    double jac = 0.0;
    check(nl_jaccard_at_k(ra, 2, rb, 2, 2, &jac) == NL_STATUS_OK, "jaccard status");
    check(fabs(jac - 1.0 / 3.0) < 1e-12, "jaccard value");

    /* Linear CKA is 1 for a matrix against itself. */
    const double e[] = {0.3, -1.2, 0.8, 0.5, 2.0, -0.7};
    double cka = 0.0;
    check(nl_linear_cka(e, 3, 2, e, 2, &cka) == NL_STATUS_OK, "cka status");
    check(fabs(cka - 1.0) < 1e-12, "cka value");

    /* Average linkage over a 3-model similarity matrix: the two most
     * similar models merge first, then the remaining one joins. */
    const double sim[] = {
        1.0, 0.9, 0.2, /* m0 */
        0.9, 1.0, 0.3, /* m1 */
        0.2, 0.3, 1.0, /* m2 */
    };
    NlMerge merges[2];
    check(nl_average_linkage(sim, 3, merges) == NL_STATUS_OK, "linkage status");
    check(merges[0].a == 0 && merges[0].b == 1 && fabs(merges[0].height - 0.1) < 1e-12,
          "first merge");
    check(merges[1].size == 3, "final merge size");

    /* Null pointers are usage errors, never crashes. */
    check(nl_ndcg_at_k(NULL, 4, 4, &ndcg) == NL_STATUS_USAGE, "null labels");
    check(nl_embeddings_len(NULL) == 0, "null handle len");

    /* Optionally open a dumped embedding store passed on the command line. */
    if (argc > 1) {
        NlEmbeddings *emb = NULL;
        check(nl_embeddings_open(argv[1], &emb) == NL_STATUS_OK, "open store");
        if (emb != NULL) {
            printf("store: %zu rows × %zu dims\n", nl_embeddings_len(emb),
                   nl_embeddings_dim(emb));
            const char *id = NULL;
            check(nl_embeddings_id(emb, 0, &id) == NL_STATUS_OK, "first id");
            if (id != NULL) {
                printf("first id: %s\n", id);
            }
            check(nl_embeddings_cka(emb, emb, &cka) == NL_STATUS_OK, "store self-cka");
            check(fabs(cka - 1.0) < 1e-9, "store self-cka value");
            nl_embeddings_free(emb);
        }
    }

    if (failures == 0) {
        printf("smoke: all checks passed\n");
    }
    return failures == 0 ? 0 : 1;
}
