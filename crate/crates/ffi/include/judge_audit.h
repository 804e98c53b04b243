#ifndef JUDGE_AUDIT_H
#define JUDGE_AUDIT_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum JaStatus {
  JA_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8, or an out-of-range argument.
   */
  JA_STATUS_INVALID_ARGUMENT = 1,
  JA_STATUS_NOT_FOUND = 2,
  JA_STATUS_IO = 3,
  JA_STATUS_PARSE = 4,
  JA_STATUS_VALIDATION = 5,
  /**
   * A metric is undefined on this input (zero variance, no comparable pairs...).
   */
  JA_STATUS_UNDEFINED = 6,
  JA_STATUS_CONFIG = 7,
  JA_STATUS_INTERNAL = 8,
  JA_STATUS_PANIC = 9,
} JaStatus;

/**
 * Scalar metrics addressable by [`ja_metric`].
 */
typedef enum JaMetric {
  JA_METRIC_RECOVERY = 0,
  JA_METRIC_TOP1_ACCURACY = 1,
  JA_METRIC_GLOBAL_CORRELATION = 2,
  JA_METRIC_WITHIN_CORRELATION = 3,
  JA_METRIC_ATTENUATION_SLOPE = 4,
  JA_METRIC_SIGN_AGREEMENT = 5,
  JA_METRIC_TIE_ADJUSTED_AGREEMENT = 6,
  JA_METRIC_MEAN_KENDALL_TAU = 7,
} JaMetric;

typedef enum JaOutcomeModel {
  JA_OUTCOME_MODEL_ZERO = 0,
  JA_OUTCOME_MODEL_CONSTANT = 1,
  JA_OUTCOME_MODEL_JUDGE_LINEAR = 2,
} JaOutcomeModel;

/**
 * Opaque pointwise dataset.
 */
typedef struct JaDataset JaDataset;

/**
 * Opaque pairwise dataset.
 */
typedef struct JaPairwise JaPairwise;

/**
 * Judge, random and oracle-best selection values.
 */
typedef struct JaSelectionValues {
  double v_oracle;
  double v_random;
  double v_judge;
} JaSelectionValues;

/**
 * Doubly robust recovery with its 95% normal interval.
 */
typedef struct JaInterval {
  double point;
  double lo;
  double hi;
  double std_error;
} JaInterval;

/**
 * Best-of-2 statistics. `agreement` is NaN when no record is untied on
 * both sides.
 */
typedef struct JaPairwiseStats {
  double tie_rate;
  double agreement;
  double p_eff;
  double recovery_bo2;
  size_t n_records;
} JaPairwiseStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the calling thread's last failure, or null. Valid until the
 * next failing call on this thread.
 */
const char *ja_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ja_version(void);

/**
 * Loads a pointwise JSONL or CSV file (format from the extension).
 * `unbounded` skips score-scale detection and range checks.
 */
enum JaStatus ja_dataset_load(const char *path, bool unbounded, struct JaDataset **out);

/**
 * Builds a fully labeled dataset from flat arrays. Prompt `p` owns the next
 * `sizes[p]` entries of `judge` and `oracle`. Scores are not range checked.
 */
enum JaStatus ja_dataset_from_arrays(const size_t *sizes,
                                     size_t n_prompts,
                                     const double *judge,
                                     const double *oracle,
                                     struct JaDataset **out);

void ja_dataset_free(struct JaDataset *ds);

size_t ja_dataset_n_prompts(const struct JaDataset *ds);

size_t ja_dataset_n_records(const struct JaDataset *ds);

enum JaStatus ja_selection_values(const struct JaDataset *ds, struct JaSelectionValues *out);

enum JaStatus ja_metric(const struct JaDataset *ds, enum JaMetric metric, double *out);

/**
 * Full audit report as JSON. `bootstrap_resamples = 0` skips intervals.
 */
enum JaStatus ja_audit_json(const struct JaDataset *ds,
                            size_t bootstrap_resamples,
                            uint64_t seed,
                            char **out);

void ja_string_free(char *s);

/**
 * Uses `labeled` and `query_prob` from the dataset.
 */
enum JaStatus ja_dr_recovery(const struct JaDataset *ds,
                             enum JaOutcomeModel model,
                             struct JaInterval *out);

/**
 * Value of routing prompts to the oracle under `policy` (for example
 * `random`, `low_margin`, `oracle_optimal`) at `budget` in [0, 1].
 */
enum JaStatus ja_route_value(const struct JaDataset *ds,
                             const char *policy,
                             double budget,
                             double *out);

/**
 * Isotonic (non-decreasing) least-squares fit; writes the fitted value of
 * each input point to `fitted` (length `n`).
 */
enum JaStatus ja_isotonic_fit(const double *scores, const double *labels, size_t n, double *fitted);

/**
 * Loads a pairwise JSONL or CSV file.
 */
enum JaStatus ja_pairwise_load(const char *path, struct JaPairwise **out);

void ja_pairwise_free(struct JaPairwise *pw);

enum JaStatus ja_pairwise_stats(const struct JaPairwise *pw, struct JaPairwiseStats *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JUDGE_AUDIT_H */
