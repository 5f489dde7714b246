#ifndef FACADE_RISK_H
#define FACADE_RISK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FrFireproof {
  FR_FIREPROOF_H = 0,
  FR_FIREPROOF_T = 1,
  FR_FIREPROOF_M = 2,
} FrFireproof;

typedef enum FrPropertyType {
  FR_PROPERTY_TYPE_COMMUNAL = 0,
  FR_PROPERTY_TYPE_NON_COMMUNAL = 1,
} FrPropertyType;

typedef enum FrStatus {
  FR_STATUS_OK = 0,
  FR_STATUS_NULL_POINTER = 1,
  FR_STATUS_INVALID_ARGUMENT = 2,
  FR_STATUS_IO = 3,
  FR_STATUS_IMAGE_DECODE = 4,
  FR_STATUS_CHECKPOINT = 5,
  FR_STATUS_NON_FINITE = 6,
  FR_STATUS_SHAPE_MISMATCH = 7,
  FR_STATUS_PANIC = 99,
} FrStatus;

/**
 * Building structure codes; match the order of probability rows.
 */
typedef enum FrStructure {
  FR_STRUCTURE_CONCRETE_LIKE = 0,
  FR_STRUCTURE_STEEL_LIKE = 1,
  FR_STRUCTURE_WOODEN_LIKE = 2,
} FrStructure;

/**
 * Opaque trained model.
 */
typedef struct FrModel FrModel;

typedef struct FrRegression {
  double mae;
  double rmse;
  double medae;
  size_t n;
} FrRegression;

typedef struct FrPrediction {
  /**
   * Gregorian construction year.
   */
  double year;
  /**
   * An [`FrStructure`] code.
   */
  uint32_t structure;
  /**
   * An [`FrPropertyType`] code.
   */
  uint32_t ptype;
  /**
   * An [`FrFireproof`] code.
   */
  uint32_t fireproof;
  float structure_probs[3];
  float ptype_probs[2];
} FrPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *fr_last_error_message(void);

/**
 * Fireproof class for a (structure, property type) pair given as codes.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum FrStatus fr_fireproof_class(uint32_t structure, uint32_t ptype, uint32_t *out);

/**
 * Uncertainty-weighted loss `sum L_i / (2 exp(s_i)) + s_i / 2` over `n` tasks.
 *
 * # Safety
 * `losses` and `log_var` must point to `n` readable doubles; `out` must be writable.
 */
enum FrStatus fr_combined_loss(const double *losses, const double *log_var, size_t n, double *out);

/**
 * 64-bit perceptual hash of an image file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FrStatus fr_phash_file(const char *path, uint64_t *out);

uint32_t fr_hamming(uint64_t a, uint64_t b);

/**
 * MAE, RMSE and MedAE over `n` paired values.
 *
 * # Safety
 * `preds` and `truths` must point to `n` readable doubles; `out` must be writable.
 */
enum FrStatus fr_regression_metrics(const double *preds,
                                    const double *truths,
                                    size_t n,
                                    struct FrRegression *out);

/**
 * Loads a checkpoint. On success `*out` owns a handle for [`fr_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FrStatus fr_model_load(const char *path, struct FrModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`fr_model_load`] not yet freed.
 */
void fr_model_free(struct FrModel *model);

/**
 * Predicts from an image file.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string; `out` writable.
 */
enum FrStatus fr_model_predict_file(const struct FrModel *model,
                                    const char *path,
                                    struct FrPrediction *out);

/**
 * Predicts from packed 8-bit RGB rows (`width * height * 3` bytes, no padding).
 *
 * # Safety
 * `model` must be a live handle; `rgb` must point to `width * height * 3`
 * readable bytes; `out` writable.
 */
enum FrStatus fr_model_predict_rgb(const struct FrModel *model,
                                   const uint8_t *rgb,
                                   uint32_t width,
                                   uint32_t height,
                                   struct FrPrediction *out);

/**
 * Number of scalar parameters in the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fr_model_param_count(const struct FrModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FACADE_RISK_H */
