#ifndef LIFELONG_H
#define LIFELONG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LlStatus {
  LL_STATUS_OK = 0,
  LL_STATUS_NULL_POINTER = 1,
  LL_STATUS_INVALID_ARGUMENT = 2,
  LL_STATUS_DIMENSION = 3,
  LL_STATUS_NON_FINITE = 4,
  LL_STATUS_CONTRACT = 5,
  LL_STATUS_CONFIG = 6,
  LL_STATUS_DATA = 7,
  LL_STATUS_CHECKPOINT = 8,
  LL_STATUS_IO = 9,
  /**
   * A run stopped early and can be resumed.
   */
  LL_STATUS_HALTED = 10,
  LL_STATUS_PANIC = 11,
  LL_STATUS_OTHER = 12,
} LlStatus;

typedef enum LlMetric {
  LL_METRIC_EUCLIDEAN = 0,
  LL_METRIC_COSINE = 1,
} LlMetric;

typedef struct LlMemory LlMemory;

typedef struct LlSoinn LlSoinn;

typedef struct LlStream LlStream;

typedef struct LlSynthConfig {
  size_t tasks;
  size_t groups_per_task;
  size_t vocab_per_task;
  double overlap;
  size_t train_per_task;
  size_t dev_per_task;
  size_t test_per_task;
  uint64_t seed;
} LlSynthConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ll_version(void);

/**
 * Length in bytes of the last error message on this thread, excluding the
 * terminator; 0 when the last call succeeded.
 */
size_t ll_last_error_length(void);

/**
 * Copies the last error message into `buf` (truncated, always terminated
 * when `len > 0`). Returns the full message length.
 */
size_t ll_last_error_message(char *buf, size_t len);

/**
 * `KL(q || p)` between diagonal Gaussians of dimension `dim`.
 */
enum LlStatus ll_kl_diag(const double *mu_q,
                         const double *logvar_q,
                         const double *mu_p,
                         const double *logvar_p,
                         size_t dim,
                         double *out_kl);

/**
 * Macro and micro F1; macro averages over the `n_classes` ids in `classes`.
 */
enum LlStatus ll_f1_scores(const size_t *golds,
                           const size_t *preds,
                           size_t n,
                           const size_t *classes,
                           size_t n_classes,
                           double *out_macro,
                           double *out_micro);

/**
 * Projects `g` (length `dim`) onto `{v : <v, g_k> >= 0}` where the `k`
 * constraint gradients are stored row-major in `constraints`.
 */
enum LlStatus ll_gem_project(const double *g,
                             size_t dim,
                             const double *constraints,
                             size_t k,
                             double *out_v);

enum LlStatus ll_soinn_new(size_t lambda,
                           double eta,
                           enum LlMetric metric,
                           struct LlSoinn **out_handle);

void ll_soinn_free(struct LlSoinn *handle);

/**
 * Presents one labeled input. `out_node` receives the node it was assigned
 * to and `out_created` whether that node is new; either may be null.
 */
enum LlStatus ll_soinn_present(struct LlSoinn *handle,
                               const double *z,
                               size_t dim,
                               size_t label,
                               size_t sample_id,
                               size_t *out_node,
                               bool *out_created);

/**
 * Ends the current winning period.
 */
enum LlStatus ll_soinn_close_period(struct LlSoinn *handle);

enum LlStatus ll_soinn_node_count(const struct LlSoinn *handle, size_t *out_count);

enum LlStatus ll_soinn_edge_count(const struct LlSoinn *handle, size_t *out_count);

enum LlStatus ll_soinn_sample_density(const struct LlSoinn *handle,
                                      size_t sample_id,
                                      double *out_density);

/**
 * Writes the `n` sample ids in `ids` to `out_ids` ordered by importance.
 */
enum LlStatus ll_soinn_rank(const struct LlSoinn *handle,
                            const size_t *ids,
                            size_t n,
                            size_t *out_ids);

/**
 * Loads a memory store written by a run (`memory_task{t}.json`).
 */
enum LlStatus ll_memory_load(const char *path_utf8, struct LlMemory **out_handle);

struct LlMemory *ll_memory_new(size_t capacity);

void ll_memory_free(struct LlMemory *handle);

enum LlStatus ll_memory_len(const struct LlMemory *handle, size_t *out_len);

enum LlStatus ll_memory_capacity(const struct LlMemory *handle, size_t *out_capacity);

enum LlStatus ll_memory_tasks(const struct LlMemory *handle, size_t *out_tasks);

/**
 * Slots held for zero-based task `task`.
 */
enum LlStatus ll_memory_task_len(const struct LlMemory *handle, size_t task, size_t *out_len);

/**
 * Per-task quota `floor(M / t)` after `t` tasks.
 */
enum LlStatus ll_memory_quota(const struct LlMemory *handle, size_t t, size_t *out_quota);

enum LlStatus ll_stream_synthetic(const struct LlSynthConfig *config, struct LlStream **out_handle);

/**
 * Loads the data section of an experiment config (JSONL or synthetic).
 */
enum LlStatus ll_stream_from_config(const char *config_path, struct LlStream **out_handle);

void ll_stream_free(struct LlStream *handle);

enum LlStatus ll_stream_task_count(const struct LlStream *handle, size_t *out_count);

enum LlStatus ll_stream_group_count(const struct LlStream *handle, size_t *out_count);

enum LlStatus ll_stream_vocab_size(const struct LlStream *handle, size_t *out_size);

/**
 * Mean top-`topk` Jaccard overlap per task; `out` must hold one value per task.
 */
enum LlStatus ll_stream_avg_jaccard(const struct LlStream *handle,
                                    size_t topk,
                                    double *out_values,
                                    size_t len);

/**
 * Runs the experiment described by a TOML config file.
 */
enum LlStatus ll_run_config(const char *config_path, bool resume);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIFELONG_H */
