/* C interface to the propq library. Every call returns a propq_status; on
 * failure propq_last_error() describes the problem for the calling thread.
 * Objects are opaque handles released with the matching *_free function.
 * Strings returned through char** are owned by the caller and released with
 * propq_string_free. */
#ifndef PROPQ_H
#define PROPQ_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define PROPQ_API __declspec(dllexport)
#else
#define PROPQ_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Values match the CLI exit codes. */
typedef enum propq_status {
  PROPQ_OK = 0,
  PROPQ_ERR_INVALID_ARGUMENT = 1,
  PROPQ_ERR_CONFIG = 2,
  PROPQ_ERR_DIVERGENCE = 3,
  PROPQ_ERR_IO = 4,
  PROPQ_ERR_INTERNAL = 5
} propq_status;

typedef enum propq_split { PROPQ_SPLIT_TRAIN = 0, PROPQ_SPLIT_TEST = 1 } propq_split;

typedef struct propq_config propq_config;
typedef struct propq_dataset propq_dataset;
typedef struct propq_model propq_model;

PROPQ_API const char* propq_version(void);
PROPQ_API const char* propq_last_error(void);
PROPQ_API void propq_string_free(char* s);

/* ---- configuration ---- */
PROPQ_API propq_status propq_config_default(propq_config** out);
PROPQ_API propq_status propq_config_parse(const char* json, propq_config** out);
PROPQ_API propq_status propq_config_load(const char* path, propq_config** out);
PROPQ_API propq_status propq_config_to_json(const propq_config* cfg, char** out);
PROPQ_API propq_status propq_config_set_seed(propq_config* cfg, uint64_t seed);
PROPQ_API propq_status propq_config_get_seed(const propq_config* cfg, uint64_t* out);
/* Hash of the canonical JSON; `exclude` lists dotted fields to leave out. */
PROPQ_API propq_status propq_config_hash(const propq_config* cfg, const char* const* exclude,
                                         size_t n_exclude, uint64_t* out);
PROPQ_API void propq_config_free(propq_config* cfg);

/* ---- scalar building blocks ---- */
/* Boxes are center form {cx, cy, w, h}. metric: iou, giou, diou, w2, nwd.
 * `c` is the NWD constant and is ignored by the other metrics. */
PROPQ_API propq_status propq_box_metric(const char* metric, const double a[4], const double b[4],
                                        double c, double* out);
/* Summed SBCE over n pairs with its gradient wrt p (grad may be NULL). */
PROPQ_API propq_status propq_sbce(const double* y, const double* p, size_t n, double* loss,
                                  double* grad);
PROPQ_API propq_status propq_rectify_score(double s_cls, double p_nwd, double omega, double* out);
/* Number of tiles covering a w x h image. */
PROPQ_API propq_status propq_plan_tiles(int w, int h, int tile_size, size_t* count);

/* ---- datasets ---- */
PROPQ_API propq_status propq_dataset_synthesize(const propq_config* cfg, propq_split split,
                                                int threads, propq_dataset** out);
PROPQ_API propq_status propq_dataset_load(const char* dir, propq_dataset** out);
PROPQ_API propq_status propq_dataset_save(const propq_dataset* data, const char* dir);
PROPQ_API propq_status propq_dataset_counts(const propq_dataset* data, size_t* images,
                                            size_t* instances);
PROPQ_API void propq_dataset_free(propq_dataset* data);

typedef struct propq_tile_summary {
  size_t source_images;
  size_t tiles;
  size_t instances;
  size_t masked;
} propq_tile_summary;

/* mode: "masked" or "keep-partial". Writes tiles and annotations.json. */
PROPQ_API propq_status propq_tile(const char* annotations_path, const char* image_dir,
                                  int tile_size, const char* mode, int mask_value,
                                  const char* out_dir, propq_tile_summary* summary);

/* ---- models ---- */
typedef void (*propq_train_callback)(size_t step, int epoch, double loss_cls, double loss_loc,
                                     double loss_nwd, double loss_total, void* user);

PROPQ_API propq_status propq_train(const propq_config* cfg, const propq_dataset* data, int threads,
                                   propq_train_callback callback, void* user, propq_model** out);
PROPQ_API propq_status propq_model_load(const char* path, propq_model** out);
PROPQ_API propq_status propq_model_save(const propq_model* model, const char* path);
PROPQ_API propq_status propq_model_checkpoint(const propq_model* model, char** out);
PROPQ_API propq_status propq_model_config(const propq_model* model, propq_config** out);
/* Replace run-time settings with those of cfg; fails if the architecture differs. */
PROPQ_API propq_status propq_model_rebind(propq_model* model, const propq_config* cfg);
PROPQ_API void propq_model_free(propq_model* model);

/* ---- evaluation and analysis ---- */
/* JSON report; ap/ar (all sizes, may be NULL) are -1 when undefined. */
PROPQ_API propq_status propq_evaluate(const propq_model* model, const propq_dataset* data,
                                      int threads, char** report_json, double* ap, double* ar);

/* Analyses each model on the dataset. Writes gradient_curves.{csv,svg} and
 * correlations.{csv,svg} into out_dir and returns a JSON summary. */
PROPQ_API propq_status propq_analyze(const propq_model* const* models, const char* const* labels,
                                     size_t n_models, const propq_dataset* data, int threads,
                                     const char* out_dir, char** summary_json);

/* Ablation sweep as CSV text. groups may be NULL for all three groups. */
PROPQ_API propq_status propq_ablate(const propq_config* base, const uint64_t* seeds,
                                    size_t n_seeds, const int* groups, size_t n_groups,
                                    int threads, char** csv);

#ifdef __cplusplus
}
#endif

#endif /* PROPQ_H */
