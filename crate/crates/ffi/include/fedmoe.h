#ifndef FEDMOE_H
#define FEDMOE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FmStatus {
  FM_STATUS_OK = 0,
  FM_STATUS_NULL_POINTER = 1,
  FM_STATUS_INVALID_ARGUMENT = 2,
  FM_STATUS_DIMENSION = 3,
  FM_STATUS_INPUT = 4,
  FM_STATUS_USAGE = 5,
  FM_STATUS_CONFIG = 6,
  FM_STATUS_FORMAT = 7,
  FM_STATUS_DEGENERATE_CLIENT = 8,
  FM_STATUS_EVALUATION = 9,
  FM_STATUS_SCHEMA = 10,
  FM_STATUS_IO = 11,
  FM_STATUS_PANIC = 12,
} FmStatus;

/**
 * Personalization algorithm selector.
 */
typedef enum FmAlgorithm {
  FM_ALGORITHM_LOCAL = 0,
  FM_ALGORITHM_PFL_FT = 1,
  FM_ALGORITHM_PFL_FB = 2,
  FM_ALGORITHM_PFL_MF = 3,
  FM_ALGORITHM_PFL_MFE = 4,
} FmAlgorithm;

typedef struct FmClient FmClient;

typedef struct FmDataset FmDataset;

typedef struct FmModel FmModel;

typedef struct FmPartition FmPartition;

/**
 * FedAvg hyperparameters. `uniform_weighting` nonzero averages client
 * updates with equal weights instead of by sample count.
 */
typedef struct FmFedConfig {
  size_t rounds;
  double participation;
  size_t local_epochs;
  size_t local_batch;
  double learning_rate;
  double momentum;
  double weight_decay;
  uint8_t uniform_weighting;
  uint64_t seed;
  /**
   * 0 uses every core.
   */
  size_t workers;
} FmFedConfig;

/**
 * Per-client personalization settings. The Local baseline trains from
 * scratch with `epochs`, `learning_rate`, `momentum` and `weight_decay`;
 * the other algorithms adapt at `learning_rate` and train the gate at `gate_lr`.
 */
typedef struct FmPersonalizeConfig {
  enum FmAlgorithm algorithm;
  size_t epochs;
  double learning_rate;
  double gate_lr;
  size_t batch_size;
  double split_ratio;
  double momentum;
  double weight_decay;
  uint64_t seed;
} FmPersonalizeConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fm_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * plus one, so callers can size a second call.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fm_last_error(char *buf, size_t len);

/**
 * Generates a train/test pair of synthetic 32x32 images.
 *
 * # Safety
 * `out_train` and `out_test` must be valid for writes.
 */
enum FmStatus fm_dataset_synthetic(size_t classes,
                                   size_t per_class,
                                   size_t test_per_class,
                                   size_t channels,
                                   double noise,
                                   uint64_t seed,
                                   struct FmDataset **out_train,
                                   struct FmDataset **out_test);

/**
 * Loads an IDX image/label pair, zero-padding images to 32x32.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out_dataset` valid for writes.
 */
enum FmStatus fm_dataset_load_idx(const char *images_path,
                                  const char *labels_path,
                                  struct FmDataset **out_dataset);

/**
 * Number of examples; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t fm_dataset_len(const struct FmDataset *ds);

/**
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t fm_dataset_classes(const struct FmDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void fm_dataset_free(struct FmDataset *ds);

/**
 * LeNet-5 for `channels`-channel 32x32 inputs.
 *
 * # Safety
 * `out_model` must be valid for writes.
 */
enum FmStatus fm_model_lenet5(size_t channels,
                              size_t classes,
                              uint64_t seed,
                              struct FmModel **out_model);

/**
 * MLP with `n_hidden` hidden layers of the given widths.
 *
 * # Safety
 * `hidden` must point to `n_hidden` values (may be null when 0);
 * `out_model` must be valid for writes.
 */
enum FmStatus fm_model_mlp(size_t channels,
                           const size_t *hidden,
                           size_t n_hidden,
                           size_t classes,
                           uint64_t seed,
                           struct FmModel **out_model);

/**
 * Trainable parameter count; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t fm_model_param_count(const struct FmModel *model);

/**
 * Predicted class for each of `n` images laid out `[n, C, 32, 32]`.
 *
 * # Safety
 * `images` must hold `n·C·32·32` values, `out_labels` room for `n`.
 */
enum FmStatus fm_model_predict(const struct FmModel *model,
                               const double *images,
                               size_t n,
                               uint32_t *out_labels);

/**
 * Plain test accuracy of `model` on `ds`.
 *
 * # Safety
 * Handles must be live; `out_accuracy` valid for writes.
 */
enum FmStatus fm_model_accuracy(const struct FmModel *model,
                                const struct FmDataset *ds,
                                double *out_accuracy);

/**
 * Writes the model as a global checkpoint.
 *
 * # Safety
 * `model` must be live; `path` NUL-terminated.
 */
enum FmStatus fm_model_save(const struct FmModel *model, const char *path);

/**
 * Reads a global checkpoint written by this library or the CLI.
 *
 * # Safety
 * `path` NUL-terminated; `out_model` valid for writes.
 */
enum FmStatus fm_model_load(const char *path, struct FmModel **out_model);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void fm_model_free(struct FmModel *model);

/**
 * Dirichlet non-IID split of `ds` over `clients` clients.
 *
 * # Safety
 * `ds` must be live; `out_partition` valid for writes.
 */
enum FmStatus fm_partition_dirichlet(const struct FmDataset *ds,
                                     size_t clients,
                                     double concentration,
                                     uint64_t seed,
                                     struct FmPartition **out_partition);

/**
 * # Safety
 * `p` must be null or a live partition handle.
 */
size_t fm_partition_num_clients(const struct FmPartition *p);

/**
 * Number of examples held by `client`.
 *
 * # Safety
 * `p` must be live; `out_size` valid for writes.
 */
enum FmStatus fm_partition_client_size(const struct FmPartition *p,
                                       size_t client,
                                       size_t *out_size);

/**
 * Copies `client`'s dataset indices into `buf`, which must hold at least
 * `fm_partition_client_size` entries.
 *
 * # Safety
 * `p` must be live; `buf` must point to `len` writable values.
 */
enum FmStatus fm_partition_client_indices(const struct FmPartition *p,
                                          size_t client,
                                          size_t *buf,
                                          size_t len);

/**
 * # Safety
 * `p` must be null or a handle not yet freed.
 */
void fm_partition_free(struct FmPartition *p);

/**
 * Runs FedAvg with the architecture of `like` (its weights are not used;
 * the initial model is drawn from `cfg.seed`). Returns the checkpoint with
 * the best test accuracy and that accuracy.
 *
 * # Safety
 * Handles must be live; `cfg`, `out_model` and `out_accuracy` valid.
 */
enum FmStatus fm_fedavg_train(const struct FmDataset *train,
                              const struct FmDataset *test,
                              const struct FmPartition *partition,
                              const struct FmModel *like,
                              const struct FmFedConfig *cfg,
                              struct FmModel **out_model,
                              double *out_accuracy);

/**
 * Personalizes `global` for one client of `partition`.
 *
 * # Safety
 * Handles must be live; `cfg` and `out_client` valid.
 */
enum FmStatus fm_personalize(const struct FmModel *global,
                             const struct FmDataset *train,
                             const struct FmPartition *partition,
                             size_t client,
                             const struct FmPersonalizeConfig *cfg,
                             struct FmClient **out_client);

/**
 * Predicted classes from a personalized client (mixing both experts for
 * gated algorithms).
 *
 * # Safety
 * As [`fm_model_predict`].
 */
enum FmStatus fm_client_predict(const struct FmClient *client,
                                const double *images,
                                size_t n,
                                uint32_t *out_labels);

/**
 * Global test accuracy and local test accuracy (per-class accuracy weighted
 * by the client's training class ratios) on `test`.
 *
 * # Safety
 * Handles must be live; outputs valid for writes.
 */
enum FmStatus fm_client_accuracy(const struct FmClient *client,
                                 const struct FmDataset *test,
                                 double *out_local,
                                 double *out_global);

/**
 * Mean gate value over the client's gate subset, or -1 for ungated algorithms.
 *
 * # Safety
 * `client` must be null or live.
 */
double fm_client_mean_gate(const struct FmClient *client);

/**
 * # Safety
 * `client` must be null or a handle not yet freed.
 */
void fm_client_free(struct FmClient *client);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDMOE_H */
