#ifndef COMEMO_H
#define COMEMO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define COMEMO_POSITION_VANILLA 0

#define COMEMO_POSITION_DHR 1

#define COMEMO_POSITION_DHR_NC 2

typedef enum ComemoStatus {
  COMEMO_STATUS_OK = 0,
  COMEMO_STATUS_NULL_POINTER = 1,
  COMEMO_STATUS_INVALID_ARGUMENT = 2,
  COMEMO_STATUS_SHAPE = 3,
  COMEMO_STATUS_CHECKPOINT = 4,
  COMEMO_STATUS_FORMAT = 5,
  COMEMO_STATUS_IO = 6,
  COMEMO_STATUS_DIVERGED = 7,
  COMEMO_STATUS_CONFIG = 8,
  COMEMO_STATUS_BUFFER_TOO_SMALL = 9,
  COMEMO_STATUS_PANIC = 10,
} ComemoStatus;

/**
 * Opaque model handle.
 */
typedef struct ComemoModel ComemoModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *comemo_last_error(void);

/**
 * Static version string.
 */
const char *comemo_version(void);

/**
 * Creates a freshly initialized model. `config_json` may be null.
 *
 * # Safety
 * `config_json` must be null or a valid C string; `out` must be writable.
 */
enum ComemoStatus comemo_model_new(const char *config_json,
                                   uint64_t seed,
                                   struct ComemoModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void comemo_model_free(struct ComemoModel *model);

/**
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum ComemoStatus comemo_model_load(const char *path, struct ComemoModel **out);

/**
 * Writes the model atomically.
 *
 * # Safety
 * `model` must be a live handle and `path` a valid C string.
 */
enum ComemoStatus comemo_model_save(const struct ComemoModel *model, const char *path);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum ComemoStatus comemo_model_vocab_size(const struct ComemoModel *model, size_t *out);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum ComemoStatus comemo_model_num_parameters(const struct ComemoModel *model, size_t *out);

/**
 * Mean `|tanh(attn_gate)|` over mixin layers.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum ComemoStatus comemo_model_average_gates(const struct ComemoModel *model, double *out);

/**
 * Logits for a text-only prompt, row-major `n_tokens x vocab_size`.
 *
 * # Safety
 * `tokens` must hold `n_tokens` values; `logits` must hold `capacity`
 * values; `out_len` must be writable.
 */
enum ComemoStatus comemo_model_forward_text(const struct ComemoModel *model,
                                            const uint32_t *tokens,
                                            size_t n_tokens,
                                            double *logits,
                                            size_t capacity,
                                            size_t *out_len);

/**
 * Greedy continuation of a text-only prompt; writes `steps` tokens.
 *
 * # Safety
 * `tokens` must hold `n_tokens` values and `out_tokens` at least `steps`.
 */
enum ComemoStatus comemo_model_decode_text(const struct ComemoModel *model,
                                           const uint32_t *tokens,
                                           size_t n_tokens,
                                           size_t steps,
                                           uint32_t *out_tokens);

/**
 * Greedy first-token accuracy over `samples` draws of a synthetic task.
 *
 * # Safety
 * `model` must be a live handle, `task_json` null or a valid C string and
 * `out` writable.
 */
enum ComemoStatus comemo_model_task_accuracy(const struct ComemoModel *model,
                                             const char *task_json,
                                             uint32_t position_mode,
                                             size_t samples,
                                             uint64_t seed,
                                             double *out);

/**
 * `<R_m q, R_n k>` for head dimension `dim`.
 *
 * # Safety
 * `q` and `k` must hold `dim` values; `out` must be writable.
 */
enum ComemoStatus comemo_rope_inner_product(const double *q,
                                            const double *k,
                                            size_t dim,
                                            int64_t m,
                                            int64_t n,
                                            double theta_base,
                                            double *out);

/**
 * `|<R_Δ q, k>|` and its summation-by-parts upper bound.
 *
 * # Safety
 * `q` and `k` must hold `dim` values; both outputs must be writable.
 */
enum ComemoStatus comemo_decay_bound(const double *q,
                                     const double *k,
                                     size_t dim,
                                     double delta,
                                     double theta_base,
                                     double *out_value,
                                     double *out_bound);

/**
 * Position IDs of a single full-detail image preceded by `text_before`
 * text tokens. IDs are written in sequence order: text, tiles, thumbnail.
 *
 * # Safety
 * `ids` must hold `capacity` values and `out_len` must be writable.
 */
enum ComemoStatus comemo_position_ids(size_t tile_rows,
                                      size_t tile_cols,
                                      size_t tile_patch,
                                      size_t shuffle_factor,
                                      size_t text_before,
                                      uint32_t position_mode,
                                      size_t *ids,
                                      size_t capacity,
                                      size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMEMO_H */
