#ifndef D2DMOE_H
#define D2DMOE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum D2dStatus {
  D2D_STATUS_OK = 0,
  D2D_STATUS_IO = 1,
  /**
   * Invalid input, configuration or API misuse.
   */
  D2D_STATUS_INVALID = 2,
  D2D_STATUS_NUMERIC = 3,
  D2D_STATUS_FORMAT = 4,
  D2D_STATUS_NULL_POINTER = 5,
  /**
   * Output buffer too small; the required length is reported.
   */
  D2D_STATUS_BUFFER_TOO_SMALL = 6,
  D2D_STATUS_PANIC = 7,
} D2dStatus;

/**
 * Opaque model handle.
 */
typedef struct D2dModel D2dModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *d2d_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *d2d_version(void);

/**
 * Load a checkpoint. On success `*out` owns a new handle.
 */
enum D2dStatus d2d_model_load(const char *path, struct D2dModel **out);

/**
 * Build a freshly initialized dense model from a JSON model config.
 */
enum D2dStatus d2d_model_build(const char *config_json, uint64_t seed, struct D2dModel **out);

enum D2dStatus d2d_model_save(const struct D2dModel *model, const char *path);

/**
 * Release a handle. Null is ignored.
 */
void d2d_model_free(struct D2dModel *model);

/**
 * Logits per output row: `vocab_size` for the LM head, classes otherwise.
 */
enum D2dStatus d2d_model_output_dim(const struct D2dModel *model, size_t *out);

/**
 * Number of MoE sites in the model.
 */
enum D2dStatus d2d_model_moe_sites(const struct D2dModel *model, size_t *out);

/**
 * Gate every MoE site with dynamic-k at threshold `tau`.
 */
enum D2dStatus d2d_model_set_dynamic_k(struct D2dModel *model, double tau);

/**
 * Gate every MoE site with static top-`k`.
 */
enum D2dStatus d2d_model_set_top_k(struct D2dModel *model, size_t k);

/**
 * Run the model on `batch × seq` token ids. Logits go to `logits_out`
 * (row-major, `rows × output_dim` where rows is `batch·seq` for the LM head
 * and `batch` for the classifier). `*logits_len` carries the buffer
 * capacity in and the written count out. `flops_per_token` may be null.
 */
enum D2dStatus d2d_model_forward(const struct D2dModel *model,
                                 const uint32_t *ids,
                                 size_t batch,
                                 size_t seq,
                                 float *logits_out,
                                 size_t *logits_len,
                                 double *flops_per_token);

/**
 * MoE-to-dense FFN cost ratio for `k` executed experts.
 */
enum D2dStatus d2d_flops_ratio(uint64_t d_m,
                               uint64_t e,
                               uint64_t n,
                               uint64_t d_h,
                               double k,
                               double *out);

/**
 * Run a full experiment spec (JSON file) writing results under `out_dir`.
 */
enum D2dStatus d2d_run_pipeline(const char *spec_path, const char *out_dir, bool resume);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* D2DMOE_H */
