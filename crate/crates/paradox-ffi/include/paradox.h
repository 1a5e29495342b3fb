#ifndef PARADOX_H
#define PARADOX_H

/* Generated by cbindgen from paradox-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum PdxStatus {
  // Success.
  PDX_STATUS_OK = 0,
  // An argument was null, empty, or out of range.
  PDX_STATUS_INVALID_INPUT = 1,
  // A referenced document or file does not exist.
  PDX_STATUS_NOT_FOUND = 2,
  // A duplicate id collided with existing state.
  PDX_STATUS_CONFLICT = 3,
  // A file failed to parse.
  PDX_STATUS_PARSE = 4,
  // A string argument was not valid UTF-8.
  PDX_STATUS_UTF8 = 5,
  // The requested value is mathematically undefined for this input.
  PDX_STATUS_UNDEFINED = 6,
  // Any other failure; see pdx_last_error.
  PDX_STATUS_INTERNAL = 7,
} PdxStatus;

// Opaque BM25 index handle. The index snapshots the store at build time.
typedef struct PdxBm25 PdxBm25;

// Opaque document store handle.
typedef struct PdxStore PdxStore;

// Paired t-test summary. When `degenerate` is nonzero the differences had
// zero variance: `t_stat` is NaN and the p-value is 0 or 1 by inspection.
typedef struct PdxPairedStats {
  size_t n;
  size_t df;
  double mean_diff;
  double std_error;
  double t_stat;
  double p_value;
  double ci_low;
  double ci_high;
  uint8_t degenerate;
} PdxPairedStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, empty when none.
// The pointer stays valid until the next failing call on the same thread.
const char *pdx_last_error(void);

// Releases a string returned by this library. Null is a no-op.
void pdx_string_free(char *s);

// Creates an empty document store. Free with pdx_store_free.
struct PdxStore *pdx_store_new(void);

// Frees a store. Null is a no-op. Indexes built from the store stay valid;
// they hold their own copy of the corpus statistics.
void pdx_store_free(struct PdxStore *store);

// Adds one clean document. Duplicate ids are conflicts.
enum PdxStatus pdx_store_add_doc(struct PdxStore *store, const char *doc_id, const char *text);

// Appends every document of a corpus JSONL file as a clean document.
enum PdxStatus pdx_store_load_jsonl(struct PdxStore *store, const char *path);

// Number of documents in the store; 0 for a null handle.
size_t pdx_store_len(const struct PdxStore *store);

// Builds a BM25 index over the store's current contents. Returns null on
// failure (empty store, k1 <= 0, b outside [0, 1]); see pdx_last_error.
struct PdxBm25 *pdx_bm25_build(const struct PdxStore *store, double k1, double b);

// Frees a BM25 index. Null is a no-op.
void pdx_bm25_free(struct PdxBm25 *index);

// BM25 score of one document for a query, written to `out`.
enum PdxStatus pdx_bm25_score(const struct PdxBm25 *index,
                              const char *query,
                              const char *doc_id,
                              double *out);

// Top-k retrieval as a JSON array `[{"doc_id": ..., "score": ...}, ...]` in
// rank order. Returns null on failure; free the string with pdx_string_free.
char *pdx_bm25_retrieve_json(const struct PdxBm25 *index, const char *query, size_t k);

// Splits text into token windows of `max_tokens` overlapping by `overlap`,
// returned as a JSON array of strings. Returns null on failure (zero
// max_tokens, overlap >= max_tokens); free with pdx_string_free.
char *pdx_chunk_text_json(const char *text, size_t max_tokens, size_t overlap);

// Fraction of nonzero flags in `correct`. An empty series scores 0.
enum PdxStatus pdx_accuracy(const uint8_t *correct, size_t len, double *out);

// Attack success rate over parallel series: per-query poison-docs-retrieved
// counts and correctness flags. An empty series scores 0.
enum PdxStatus pdx_asr(const size_t *poisoned_retrieved,
                       const uint8_t *correct,
                       size_t len,
                       double *out);

// Mean poison-docs-retrieved count. An empty series scores 0.
enum PdxStatus pdx_selection_rate(const size_t *poisoned_retrieved, size_t len, double *out);

// NDCG@k for one ranking. `poisoned_in_rank` holds 0/1 flags in rank order;
// `n_poison_docs` is how many poison documents exist for the query. Returns
// PDX_STATUS_UNDEFINED (leaving `out` untouched) when no poison documents
// exist or k is zero.
enum PdxStatus pdx_ndcg_at_k(const uint8_t *poisoned_in_rank,
                             size_t len,
                             size_t n_poison_docs,
                             size_t k,
                             double *out);

// Two-sided paired t-test on the differences `a[i] - b[i]`. Needs at least
// two pairs.
enum PdxStatus pdx_paired_ttest(const double *a,
                                const double *b,
                                size_t len,
                                struct PdxPairedStats *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PARADOX_H */
