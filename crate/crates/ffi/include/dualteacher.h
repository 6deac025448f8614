#ifndef DUALTEACHER_H
#define DUALTEACHER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DtStatus {
  DT_STATUS_OK = 0,
  DT_STATUS_NULL_POINTER = 1,
  DT_STATUS_INVALID_ARGUMENT = 2,
  DT_STATUS_DIMENSION = 3,
  DT_STATUS_IO = 4,
  DT_STATUS_STATE = 5,
  DT_STATUS_DIVERGENCE = 6,
  DT_STATUS_PANIC = 7,
} DtStatus;

/**
 * Labeled/unlabeled/validation splits of one fold.
 */
typedef struct DtDataset DtDataset;

/**
 * Exponential moving average over a flat parameter vector.
 */
typedef struct DtEma DtEma;

typedef struct DtNetwork DtNetwork;

/**
 * A training run in progress; owns a copy of its dataset.
 */
typedef struct DtTrainer DtTrainer;

typedef struct DtTranslator DtTranslator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread; empty after a
 * success. The pointer stays valid until the next call on this thread.
 */
const char *dt_last_error_message(void);

/**
 * Generates a phantom dataset and keeps fold `fold_index`.
 */
enum DtStatus dt_dataset_generate(uint64_t seed,
                                  size_t n_source,
                                  size_t n_target,
                                  size_t n_folds,
                                  double labeled_frac,
                                  size_t image_size,
                                  size_t num_classes,
                                  size_t fold_index,
                                  struct DtDataset **out);

enum DtStatus dt_dataset_load(const char *dir, struct DtDataset **out);

enum DtStatus dt_dataset_save(const struct DtDataset *dataset, const char *dir);

/**
 * Sizes of the labeled source, labeled target, unlabeled target and
 * validation splits. Any output pointer may be null.
 */
enum DtStatus dt_dataset_counts(const struct DtDataset *dataset,
                                size_t *n_source,
                                size_t *n_target,
                                size_t *n_unlabeled,
                                size_t *n_val);

void dt_dataset_free(struct DtDataset *dataset);

/**
 * Starts a run of `method` (e.g. `"dual_teacher"`) with default
 * hyperparameters except for the given epoch count and learning rate.
 */
enum DtStatus dt_trainer_new(const struct DtDataset *dataset,
                             const char *method,
                             uint64_t seed,
                             size_t epochs,
                             double learning_rate,
                             struct DtTrainer **out);

/**
 * Runs one epoch; writes the validation mean Dice if `mean_dice` is non-null.
 */
enum DtStatus dt_trainer_run_epoch(struct DtTrainer *trainer, double *mean_dice);

enum DtStatus dt_trainer_epoch(const struct DtTrainer *trainer, size_t *epoch);

enum DtStatus dt_trainer_save_checkpoint(const struct DtTrainer *trainer, const char *path);

/**
 * Copies the current student network into a new handle.
 */
enum DtStatus dt_trainer_student(const struct DtTrainer *trainer, struct DtNetwork **out);

void dt_trainer_free(struct DtTrainer *trainer);

/**
 * A freshly initialized single-channel network with group normalization.
 */
enum DtStatus dt_network_new(size_t num_classes,
                             size_t base_channels,
                             size_t depth,
                             uint64_t seed,
                             struct DtNetwork **out);

enum DtStatus dt_network_param_count(const struct DtNetwork *network, size_t *count);

/**
 * Argmax segmentation of one image into `labels` (`height * width` bytes).
 */
enum DtStatus dt_network_predict(const struct DtNetwork *network,
                                 const double *image,
                                 size_t height,
                                 size_t width,
                                 uint8_t *labels);

void dt_network_free(struct DtNetwork *network);

/**
 * Teacher initialized as a copy of `params`, decaying with `alpha`.
 */
enum DtStatus dt_ema_new(const double *params, size_t len, double alpha, struct DtEma **out);

/**
 * `teacher <- alpha * teacher + (1 - alpha) * student`.
 */
enum DtStatus dt_ema_update(struct DtEma *ema, const double *student, size_t len);

enum DtStatus dt_ema_params(const struct DtEma *ema, double *out, size_t len);

enum DtStatus dt_ema_step(const struct DtEma *ema, uint64_t *step);

void dt_ema_free(struct DtEma *ema);

/**
 * Histogram-matching translator fitted on the dataset's target-domain
 * training images (labeled and unlabeled).
 */
enum DtStatus dt_translator_fit(const struct DtDataset *dataset, struct DtTranslator **out);

enum DtStatus dt_translator_apply(const struct DtTranslator *translator,
                                  const double *image,
                                  size_t height,
                                  size_t width,
                                  double *out);

void dt_translator_free(struct DtTranslator *translator);

/**
 * Consistency weight at epoch `t` with the default schedule over `t_max` epochs.
 */
enum DtStatus dt_lambda_con(double t, size_t t_max, double *out);

enum DtStatus dt_dice_coefficient(const uint8_t *pred,
                                  const uint8_t *truth,
                                  size_t height,
                                  size_t width,
                                  uint8_t class_id,
                                  double *out);

/**
 * Cross-entropy plus soft Dice (background included). `grad`, if non-null,
 * receives the gradient with respect to `probs`.
 */
enum DtStatus dt_seg_loss(const double *probs,
                          const uint8_t *target,
                          size_t classes,
                          size_t height,
                          size_t width,
                          double *value,
                          double *grad);

/**
 * Soft-target cross-entropy from `teacher` to `student`; `grad` is with
 * respect to the student map.
 */
enum DtStatus dt_kd_loss(const double *teacher,
                         const double *student,
                         size_t classes,
                         size_t height,
                         size_t width,
                         double *value,
                         double *grad);

/**
 * Mean squared difference between student and teacher maps; `grad` is with
 * respect to the student map.
 */
enum DtStatus dt_consistency_loss(const double *student,
                                  const double *teacher,
                                  size_t classes,
                                  size_t height,
                                  size_t width,
                                  double *value,
                                  double *grad);

/**
 * Null-terminated method name for index `i` of the eight supported
 * methods, or null when out of range. The string is static.
 */
const char *dt_method_name(size_t i);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUALTEACHER_H */
