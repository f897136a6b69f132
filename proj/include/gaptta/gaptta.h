/* C interface to the gaptta library. All handles are opaque; every function
 * returns a status code and, on failure, leaves a message retrievable with
 * gaptta_last_error() on the calling thread. */
#ifndef GAPTTA_H
#define GAPTTA_H

#include <stddef.h>
#include <stdint.h>

#if defined(GAPTTA_BUILDING_LIBRARY)
#define GAPTTA_API __attribute__((visibility("default")))
#else
#define GAPTTA_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum gaptta_status {
    GAPTTA_OK = 0,
    GAPTTA_ERR_INVALID_ARGUMENT = 1,
    GAPTTA_ERR_SHAPE = 2,
    GAPTTA_ERR_NON_FINITE = 3,
    GAPTTA_ERR_FORMAT = 4,
    GAPTTA_ERR_VERSION = 5,
    GAPTTA_ERR_TRUNCATED = 6,
    GAPTTA_ERR_LENGTH = 7,
    GAPTTA_ERR_UNSUPPORTED = 8,
    GAPTTA_ERR_IO = 9,
    GAPTTA_ERR_CONFIG = 10,
    GAPTTA_ERR_DIMENSION = 11,
    /* A command ran but reported failures (failed runs, tolerance breach). */
    GAPTTA_ERR_RUN_FAILED = 12,
    GAPTTA_ERR_INTERNAL = 13
} gaptta_status;

typedef struct gaptta_model gaptta_model;
typedef struct gaptta_cache gaptta_cache;
typedef struct gaptta_session gaptta_session;

/* Receives each line a command prints; may be NULL. */
typedef void (*gaptta_line_fn)(const char* line, void* user);

GAPTTA_API const char* gaptta_version(void);
GAPTTA_API const char* gaptta_last_error(void);
GAPTTA_API const char* gaptta_status_name(gaptta_status status);

/* Models */
GAPTTA_API gaptta_status gaptta_model_load(const char* path, gaptta_model** out);
GAPTTA_API gaptta_status gaptta_model_save(const gaptta_model* model, const char* path);
GAPTTA_API gaptta_status gaptta_model_clone(const gaptta_model* model, gaptta_model** out);
GAPTTA_API void gaptta_model_free(gaptta_model* model);
GAPTTA_API gaptta_status gaptta_model_dims(const gaptta_model* model, size_t* input_dim, size_t* embed_dim,
                                           size_t* classes);
/* Row-major rows x input_dim inputs; writes rows labels. batch_stats != 0
 * normalises with the batch moments (rows >= 2). */
GAPTTA_API gaptta_status gaptta_model_predict(const gaptta_model* model, const double* inputs, size_t rows,
                                              int batch_stats, int32_t* labels);
GAPTTA_API gaptta_status gaptta_model_embed(const gaptta_model* model, const double* inputs, size_t rows,
                                            int batch_stats, double* embeddings);

/* Prototype gradient caches. loss: "em" | "ce"; mode: "hard" | "soft". */
GAPTTA_API gaptta_status gaptta_cache_build(const gaptta_model* model, const char* loss, const char* mode,
                                            gaptta_cache** out);
GAPTTA_API void gaptta_cache_free(gaptta_cache* cache);

typedef struct gaptta_adapt_options {
    const char* method; /* no-adapt | norm | pl | tent | eata-lite */
    int gap_enabled;
    double beta;
    double gamma;
    const char* gap_mode;   /* hard | soft */
    const char* proto_loss; /* em | ce */
    const char* data_loss;  /* em | ce */
    double lr;
    double momentum;
    double eata_margin_factor;
} gaptta_adapt_options;

GAPTTA_API void gaptta_adapt_options_default(gaptta_adapt_options* options);

/* A session adapts the given model in place; the model must outlive it. The
 * cache may be NULL (one is built when GAP is enabled). */
GAPTTA_API gaptta_status gaptta_session_create(gaptta_model* model, const gaptta_adapt_options* options,
                                               const gaptta_cache* cache, gaptta_session** out);
GAPTTA_API void gaptta_session_free(gaptta_session* session);
/* One adaptation step on an unlabeled batch; writes rows predictions and
 * optionally the loss terms and beta_t (any pointer may be NULL). */
GAPTTA_API gaptta_status gaptta_session_step(gaptta_session* session, const double* inputs, size_t rows,
                                             int32_t* predictions, double* tta_loss, double* gap_loss,
                                             double* beta_t);

/* Commands. out_dir may be NULL (GAPTTA_OUT_DIR, then the working directory);
 * seed overrides the configured seeds when has_seed != 0. */
GAPTTA_API gaptta_status gaptta_cmd_pretrain(const char* config_path, const char* out_dir, int has_seed,
                                             uint64_t seed, gaptta_line_fn sink, void* user);
GAPTTA_API gaptta_status gaptta_cmd_adapt(const char* config_path, const char* out_dir, int has_seed,
                                          uint64_t seed, size_t jobs, gaptta_line_fn sink, void* user);
GAPTTA_API gaptta_status gaptta_cmd_export_embeddings(const char* config_path, const char* out_dir, int has_seed,
                                                      uint64_t seed, gaptta_line_fn sink, void* user);
/* inject_fault flips the sign of the EM weight gradient under test. */
GAPTTA_API gaptta_status gaptta_cmd_gradcheck(int has_seed, uint64_t seed, int inject_fault, gaptta_line_fn sink,
                                              void* user);

#ifdef __cplusplus
}
#endif

#endif
