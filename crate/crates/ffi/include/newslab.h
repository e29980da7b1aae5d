/*
 * newslab C API: ranking metrics, linear CKA, average-linkage clustering,
 * and read access to dumped embedding stores.
 *
 * Every fallible function returns an NlStatus; on any non-OK status,
 * nl_last_error() describes the failure (thread-local, valid until the
 * next failing call on the same thread).
 */

#ifndef NEWSLAB_H
#define NEWSLAB_H

/* Generated by cbindgen from newslab-ffi. Do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible function.
//
// The numeric values of `CONFIG`, `DIVERGENCE`, `ARTIFACT`, and
// `ALIGNMENT` match the `newslab` binary's exit codes.
typedef enum NlStatus {
  // Success; out-parameters are valid.
  NL_STATUS_OK = 0,
  // API misuse: null pointer, bad length, duplicate ids, k = 0, …
  NL_STATUS_USAGE = 1,
  // Invalid configuration or input values.
  NL_STATUS_CONFIG = 2,
  // A computation produced non-finite values.
  NL_STATUS_DIVERGENCE = 3,
  // A stored artifact is corrupt or inconsistent.
  NL_STATUS_ARTIFACT = 4,
  // Inputs that must align row-for-row do not.
  NL_STATUS_ALIGNMENT = 5,
  // Structurally valid input that is degenerate for the computation.
  NL_STATUS_DEGENERATE = 6,
  // Dataset content problem (unknown id, missing entry).
  NL_STATUS_DATA = 7,
  // Malformed file content.
  NL_STATUS_FORMAT = 8,
  // Underlying I/O failure.
  NL_STATUS_IO = 9,
  // An internal panic was caught at the boundary.
  NL_STATUS_PANIC = 10,
} NlStatus;

// An opened embedding store: ids and an id-sorted row-major matrix.
typedef struct NlEmbeddings NlEmbeddings;

// One agglomeration step of average-linkage clustering.
typedef struct NlMerge {
  // Smallest original index in the first merged cluster (`a < b`).
  size_t a;
  // Smallest original index in the second merged cluster.
  size_t b;
  // Merge height: average dissimilarity `1 − similarity`.
  double height;
  // Total members in the merged cluster.
  size_t size;
} NlMerge;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *nl_version(void);

// Description of the most recent failure on this thread.
//
// Empty until a call fails; the pointer stays valid until the next failing
// call on the same thread.
const char *nl_last_error(void);

// Binary nDCG@k of a ranked slate.
//
// `labels` holds `len` entries, one per ranked candidate in rank order;
// non-zero means relevant. Slates with no relevant candidate are
// `NL_STATUS_DEGENERATE` (the metric is undefined there).
//
// # Safety
// `labels` must point to `len` readable bytes and `out` to a writable
// double.
enum NlStatus nl_ndcg_at_k(const uint8_t *labels, size_t len, size_t k, double *out);

// Jaccard@k between two ranked id lists (NUL-terminated strings, best
// first). Order within the top-k does not matter; duplicate ids within one
// list are `NL_STATUS_USAGE`.
//
// # Safety
// `a` and `b` must each point to `a_len` / `b_len` valid NUL-terminated
// strings, and `out` to a writable double.
enum NlStatus nl_jaccard_at_k(const char *const *a,
                              size_t a_len,
                              const char *const *b,
                              size_t b_len,
                              size_t k,
                              double *out);

// Linear CKA between two row-major embedding matrices over the same
// `rows` items (row i of `a` and row i of `b` describe the same item).
//
// # Safety
// `a` must point to `rows * a_cols` doubles, `b` to `rows * b_cols`
// doubles, and `out` to a writable double.
enum NlStatus nl_linear_cka(const double *a,
                            size_t rows,
                            size_t a_cols,
                            const double *b,
                            size_t b_cols,
                            double *out);

// Average-linkage hierarchical clustering of an `n × n` row-major
// similarity matrix (symmetric, unit diagonal; violations are
// `NL_STATUS_DEGENERATE`). Writes exactly `n − 1` merges.
//
// # Safety
// `similarity` must point to `n * n` doubles and `out_merges` to `n − 1`
// writable `NlMerge` slots (`n >= 2`).
enum NlStatus nl_average_linkage(const double *similarity, size_t n, struct NlMerge *out_merges);

// Open an embedding store written by `newslab dump-embeddings` (binary or
// TSV; the format is sniffed). On success `*out` owns the handle.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a writable
// pointer slot.
enum NlStatus nl_embeddings_open(const char *path, struct NlEmbeddings **out);

// Number of rows in an opened store, or 0 for NULL.
//
// # Safety
// `handle` must be NULL or a live handle from `nl_embeddings_open`.
size_t nl_embeddings_len(const struct NlEmbeddings *handle);

// Embedding dimension of an opened store, or 0 for NULL.
//
// # Safety
// `handle` must be NULL or a live handle from `nl_embeddings_open`.
size_t nl_embeddings_dim(const struct NlEmbeddings *handle);

// The id of row `index` (ids are sorted ascending). The pointer stays
// valid while the handle lives.
//
// # Safety
// `handle` must be a live handle and `out` a writable pointer slot.
enum NlStatus nl_embeddings_id(const struct NlEmbeddings *handle, size_t index, const char **out);

// Linear CKA between two opened stores. Both must contain exactly the
// same ids; a mismatch is `NL_STATUS_ALIGNMENT` naming the offending id.
//
// # Safety
// `a` and `b` must be live handles and `out` a writable double.
enum NlStatus nl_embeddings_cka(const struct NlEmbeddings *a,
                                const struct NlEmbeddings *b,
                                double *out);

// Release a handle. NULL is a no-op; double-free is undefined behaviour.
//
// # Safety
// `handle` must be NULL or an unreleased handle from
// `nl_embeddings_open`.
void nl_embeddings_free(struct NlEmbeddings *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEWSLAB_H */
