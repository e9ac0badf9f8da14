/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef HEADBIAS_H
#define HEADBIAS_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum HbStatus {
  HB_STATUS_OK = 0,
  HB_STATUS_NULL_POINTER = 1,
  HB_STATUS_INVALID_UTF8 = 2,
  HB_STATUS_IO = 3,
  HB_STATUS_FORMAT = 4,
  HB_STATUS_VALIDATION = 5,
  HB_STATUS_DIMENSION = 6,
  HB_STATUS_UNTESTABLE = 7,
  HB_STATUS_INFEASIBLE = 8,
  HB_STATUS_PANIC = 9,
} HbStatus;

typedef struct HbClassifier HbClassifier;

typedef struct HbPrototypes HbPrototypes;

typedef struct HbReport HbReport;

typedef struct HbStore HbStore;

typedef struct HbDims {
  uintptr_t n_images;
  uintptr_t n_layers;
  uintptr_t n_heads;
  uintptr_t embed_dim;
  uintptr_t n_classes;
} HbDims;

typedef struct HbHeadId {
  uint32_t layer;
  uint32_t head;
} HbHeadId;

typedef struct HbChi2 {
  double chi2;
  uintptr_t dof;
  uintptr_t dof_before_drop;
  double p_value;
  uint64_t n;
  uintptr_t rows;
  uintptr_t cols;
} HbChi2;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. Valid until the next
 * call on the same thread; never null.
 */
const char *hb_last_error_message(void);

/**
 * Library version, static storage.
 */
const char *hb_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void hb_string_free(char *s);

/**
 * Loads a store directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum HbStatus hb_store_load(const char *path, struct HbStore **out);

/**
 * # Safety
 * `store` must be null or a handle from `hb_store_load`, not yet freed.
 */
void hb_store_free(struct HbStore *store);

/**
 * # Safety
 * `store` must be a live handle and `out` writable.
 */
enum HbStatus hb_store_dims(const struct HbStore *store, struct HbDims *out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum HbStatus hb_prototypes_load(const char *path, struct HbPrototypes **out);

/**
 * # Safety
 * `p` must be null or a handle from `hb_prototypes_load`, not yet freed.
 */
void hb_prototypes_free(struct HbPrototypes *p);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum HbStatus hb_classifier_load(const char *path, struct HbClassifier **out);

/**
 * # Safety
 * `c` must be null or a handle from `hb_classifier_load`, not yet freed.
 */
void hb_classifier_free(struct HbClassifier *c);

/**
 * Predicts every image, mean-ablating `heads` (may be null when
 * `n_ablate` is 0). `predictions` must hold `n_images` entries.
 *
 * # Safety
 * Handles must be live; `heads` must point to `n_ablate` entries and
 * `predictions` to `capacity` writable entries.
 */
enum HbStatus hb_classify(const struct HbStore *store,
                          const struct HbClassifier *classifier,
                          const struct HbHeadId *heads,
                          uintptr_t n_ablate,
                          uint32_t *predictions,
                          uintptr_t capacity);

/**
 * Runs the full audit. `config_toml` may be null for defaults; `attribute`
 * (if non-null) overrides the configured attribute.
 *
 * # Safety
 * Handles must be live, strings NUL-terminated, `out` writable.
 */
enum HbStatus hb_audit_run(const struct HbStore *store,
                           const struct HbPrototypes *prototypes,
                           const struct HbClassifier *classifier,
                           const char *config_toml,
                           const char *attribute,
                           struct HbReport **out);

/**
 * Report as JSON, owned by the report handle.
 *
 * # Safety
 * `report` must be a live handle.
 */
const char *hb_report_json(const struct HbReport *report);

/**
 * Copy of the report JSON that the caller frees with `hb_string_free`.
 *
 * # Safety
 * `report` must be a live handle and `out` writable.
 */
enum HbStatus hb_report_json_copy(const struct HbReport *report, char **out);

/**
 * Number of suspected heads.
 *
 * # Safety
 * `report` must be a live handle.
 */
uintptr_t hb_report_suspected_count(const struct HbReport *report);

/**
 * Copies up to `capacity` suspected heads into `out`; `written` receives
 * the number copied.
 *
 * # Safety
 * `report` must be live, `out` must hold `capacity` entries, `written`
 * writable.
 */
enum HbStatus hb_report_suspected(const struct HbReport *report,
                                  struct HbHeadId *out,
                                  uintptr_t capacity,
                                  uintptr_t *written);

/**
 * # Safety
 * `report` must be null or a handle from `hb_audit_run`, not yet freed.
 */
void hb_report_free(struct HbReport *report);

/**
 * Chi-squared test of a row-major `rows x cols` count table; all-zero
 * columns are dropped first.
 *
 * # Safety
 * `counts` must point to `rows * cols` values and `out` be writable.
 */
enum HbStatus hb_chi2(const uint64_t *counts, uintptr_t rows, uintptr_t cols, struct HbChi2 *out);

/**
 * Cramér's V from a chi-squared statistic.
 *
 * # Safety
 * `out` must be writable.
 */
enum HbStatus hb_cramers_v(double chi2, uint64_t n, uintptr_t rows, uintptr_t cols, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEADBIAS_H */
