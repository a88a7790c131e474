#ifndef COTRAIN_H
#define COTRAIN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CotrainStatus {
  COTRAIN_STATUS_OK = 0,
  COTRAIN_STATUS_NULL_POINTER = 1,
  COTRAIN_STATUS_INVALID_UTF8 = 2,
  COTRAIN_STATUS_CONFIG = 3,
  COTRAIN_STATUS_ARGUMENT = 4,
  COTRAIN_STATUS_STATE = 5,
  COTRAIN_STATUS_NUMERIC = 6,
  COTRAIN_STATUS_IO = 7,
  COTRAIN_STATUS_JSON = 8,
  COTRAIN_STATUS_OTHER = 9,
  COTRAIN_STATUS_PANIC = 10,
} CotrainStatus;

/**
 * Opaque training handle.
 */
typedef struct CotrainTrainer CotrainTrainer;

/**
 * Outcome probabilities of a majority comparison between two label sets.
 */
typedef struct CotrainPrecision {
  double a_strict;
  double p_tie;
  double p_below;
} CotrainPrecision;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message from the last call on this thread; empty if it succeeded.
 * Valid until the next cotrain call on the same thread.
 */
const char *cotrain_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cotrain_version(void);

/**
 * Creates a trainer from a JSON run config (`NULL` for defaults).
 *
 * # Safety
 * `config_json` must be NULL or a valid NUL-terminated string; `out` must be
 * a valid pointer.
 */
enum CotrainStatus cotrain_trainer_new(const char *config_json,
                                       uint64_t seed,
                                       struct CotrainTrainer **out);

/**
 * Releases a trainer. NULL is ignored.
 *
 * # Safety
 * `trainer` must be NULL or a handle from [`cotrain_trainer_new`] that has
 * not been freed.
 */
void cotrain_trainer_free(struct CotrainTrainer *trainer);

/**
 * Runs one training step. When `metrics_json` is non-NULL it receives the
 * step's metrics record as JSON, owned by the trainer.
 *
 * # Safety
 * `trainer` must be a live handle; `metrics_json` must be NULL or valid.
 */
enum CotrainStatus cotrain_trainer_step(struct CotrainTrainer *trainer, const char **metrics_json);

/**
 * Number of completed steps, or -1 for a NULL handle.
 *
 * # Safety
 * `trainer` must be NULL or a live handle.
 */
int64_t cotrain_trainer_steps_done(const struct CotrainTrainer *trainer);

/**
 * 1 when every configured step has run, 0 otherwise, -1 for NULL.
 *
 * # Safety
 * `trainer` must be NULL or a live handle.
 */
int32_t cotrain_trainer_is_done(const struct CotrainTrainer *trainer);

/**
 * Run summary as JSON, owned by the trainer.
 *
 * # Safety
 * `trainer` must be a live handle and `summary_json` a valid pointer.
 */
enum CotrainStatus cotrain_trainer_summary(struct CotrainTrainer *trainer,
                                           const char **summary_json);

/**
 * Exact probability that `m` correct labels outvote `m` wrong ones.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CotrainStatus cotrain_exact_precision(double p_plus,
                                           double p_minus,
                                           size_t m,
                                           struct CotrainPrecision *out);

/**
 * Concentration lower bound on the majority precision for `mu > 1`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CotrainStatus cotrain_hoeffding_bound(double mu, size_t m, double *out);

/**
 * Standardizes `len` values into `out` (population σ, zeros when flat).
 * `values` and `out` may alias.
 *
 * # Safety
 * Both pointers must be valid for `len` elements.
 */
enum CotrainStatus cotrain_standardize(const double *values, size_t len, double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* COTRAIN_H */
