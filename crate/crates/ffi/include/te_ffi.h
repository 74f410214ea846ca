#ifndef TE_FFI_H
#define TE_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum TeStatus {
  TE_STATUS_OK = 0,
  TE_STATUS_NULL_POINTER = 1,
  TE_STATUS_INVALID_ARGUMENT = 2,
  TE_STATUS_IO = 3,
  TE_STATUS_PARSE = 4,
  TE_STATUS_CONCEPT_ABSENT = 5,
  TE_STATUS_SNAPSHOT = 6,
  TE_STATUS_PANIC = 7,
} TeStatus;

/**
 * All replicates of one corpus.
 */
typedef struct TeReplicateSet TeReplicateSet;

/**
 * A snapshot loaded from disk.
 */
typedef struct TeSnapshot TeSnapshot;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *te_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *te_version(void);

/**
 * Loads `n_paths` replicate files into a new handle stored in `*out`.
 *
 * # Safety
 * `paths` must point to `n_paths` valid C strings; `corpus_id` and `label`
 * must be valid C strings; `out` must be writable.
 */
enum TeStatus te_replicate_set_load(const char *const *paths,
                                    size_t n_paths,
                                    const char *corpus_id,
                                    const char *label,
                                    int64_t order_index,
                                    struct TeReplicateSet **out);

/**
 * Releases a handle from [`te_replicate_set_load`]. Null is ignored.
 *
 * # Safety
 * `set` must be null or a handle not yet freed.
 */
void te_replicate_set_free(struct TeReplicateSet *set);

/**
 * Replicate count, dimension and shared vocabulary size. Any output
 * pointer may be null.
 *
 * # Safety
 * `set` must be a live handle; non-null outputs must be writable.
 */
enum TeStatus te_replicate_set_info(const struct TeReplicateSet *set,
                                    size_t *m,
                                    size_t *dim,
                                    size_t *shared);

/**
 * EC@k of `concept`, in [0, 1].
 *
 * # Safety
 * `set` must be a live handle; `concept` a valid C string; `out` writable.
 */
enum TeStatus te_embedding_confidence(const struct TeReplicateSet *set,
                                      const char *concept,
                                      size_t k,
                                      double *out);

/**
 * Mean and population standard deviation over replicates of cos(a, b).
 *
 * # Safety
 * `set` must be a live handle; `a`, `b` valid C strings; outputs writable.
 */
enum TeStatus te_pairwise_similarity(const struct TeReplicateSet *set,
                                     const char *a,
                                     const char *b,
                                     double *mean,
                                     double *std);

/**
 * Reads and verifies the snapshot at `root` into a new handle in `*out`.
 *
 * # Safety
 * `root` must be a valid C string; `out` writable.
 */
enum TeStatus te_snapshot_open(const char *root, struct TeSnapshot **out);

/**
 * Releases a handle from [`te_snapshot_open`]. Null is ignored.
 *
 * # Safety
 * `snap` must be null or a handle not yet freed.
 */
void te_snapshot_free(struct TeSnapshot *snap);

/**
 * Number of corpora in the snapshot.
 *
 * # Safety
 * `snap` must be a live handle; `out` writable.
 */
enum TeStatus te_snapshot_corpus_count(const struct TeSnapshot *snap, size_t *out);

/**
 * Similarity of `a` and `b` in corpus `corpus_index` (in snapshot order),
 * from the stored replicate vectors.
 *
 * # Safety
 * `snap` must be a live handle; `a`, `b` valid C strings; outputs writable.
 */
enum TeStatus te_snapshot_similarity(const struct TeSnapshot *snap,
                                     size_t corpus_index,
                                     const char *a,
                                     const char *b,
                                     double *mean,
                                     double *std);

/**
 * Fits the similarity transform taking `source` onto `target`, where both
 * hold `n` interleaved (x, y) pairs matched by index, and writes the
 * transformed source to `out` (2n doubles). `rotation` receives the
 * row-major 2x2 matrix and `translation` two doubles. Fewer than three
 * points yields the identity. Any of the transform outputs may be null.
 *
 * # Safety
 * `source`, `target` must hold 2n readable doubles and `out` 2n writable
 * doubles; non-null transform outputs must be writable.
 */
enum TeStatus te_procrustes_align(const double *source,
                                  const double *target,
                                  size_t n,
                                  double *out,
                                  double *rotation,
                                  double *scale,
                                  double *translation,
                                  double *disparity_before,
                                  double *disparity_after);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TE_FFI_H */
