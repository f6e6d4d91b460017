/* C interface to the semantic-link simulator: configuration, channel trace
 * files, predictor/codec training, and full sweep runs behind opaque handles.
 *
 * Every function that can fail returns a semkb_status; SEMKB_OK is 0. On
 * failure, semkb_last_error() returns a message for the calling thread,
 * valid until that thread's next semkb_* call. Handles from *_load / *_parse
 * / semkb_run are owned by the caller and released with the matching
 * *_free; passing NULL to a *_free is a no-op.
 */
#ifndef SEMKB_H
#define SEMKB_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum semkb_status {
  SEMKB_OK = 0,
  SEMKB_ERR_CONFIG = 1,
  SEMKB_ERR_INVALID_INPUT = 2,
  SEMKB_ERR_SHAPE = 3,
  SEMKB_ERR_NUMERIC = 4,
  SEMKB_ERR_VOCAB = 5,
  SEMKB_ERR_CONTEXT_OVERFLOW = 6,
  SEMKB_ERR_STATE = 7,
  SEMKB_ERR_GENERATION = 8,
  SEMKB_ERR_EMPTY_GENERATION = 9,
  SEMKB_ERR_METRIC = 10,
  SEMKB_ERR_FORMAT = 11,
  SEMKB_ERR_BACKEND = 12,
  SEMKB_ERR_IO = 13,
  SEMKB_ERR_NULL_ARGUMENT = 14,
  SEMKB_ERR_UNKNOWN = 15
} semkb_status;

typedef struct semkb_config semkb_config;
typedef struct semkb_trace semkb_trace;
typedef struct semkb_record semkb_record;

typedef struct semkb_metric_row {
  uint64_t seed;
  double snr_db;
  char variant[24];
  double map;
  double rank1;
  double rank5;
  double rank10;
  double nmse;
} semkb_metric_row;

typedef struct semkb_filter_stats {
  int64_t samples;
  int64_t accepted;
  int64_t fallbacks;
  int64_t generation_calls;
} semkb_filter_stats;

const char* semkb_version(void);

/* message from the calling thread's most recent failing call; "" after a
 * success */
const char* semkb_last_error(void);

/* ---- configuration ---- */

semkb_status semkb_config_parse(const char* text, semkb_config** out);
semkb_status semkb_config_load(const char* path, semkb_config** out);
void semkb_config_free(semkb_config* cfg);

/* writes the 16-hex-digit hash plus a terminator; buf_len must be >= 17 */
semkb_status semkb_config_hash(const semkb_config* cfg, char* buf, size_t buf_len);

/* replaces the sweep seed list with the single given seed */
semkb_status semkb_config_set_seed(semkb_config* cfg, uint64_t seed);
semkb_status semkb_config_set_ablations(semkb_config* cfg, int disable_sdg, int disable_cdg);
semkb_status semkb_config_set_snr_grid(semkb_config* cfg, const double* snr_db, size_t count);
/* bits = -1 clears quantization */
semkb_status semkb_config_set_feedback_bits(semkb_config* cfg, int64_t bits);

/* ---- channel trace files (CSIF1) ---- */

/* generates `length` samples from the config's channel model and saves them */
semkb_status semkb_gen_csi(const semkb_config* cfg, uint64_t seed, uint32_t length,
                           const char* path);
semkb_status semkb_csi_load(const char* path, semkb_trace** out);
void semkb_trace_free(semkb_trace* trace);
semkb_status semkb_trace_dims(const semkb_trace* trace, uint16_t* n_r, uint16_t* n_t,
                              uint32_t* length);

/* ---- training entry points ---- */

/* trains the CSI predictor exactly as a sweep would for this seed and saves
 * its checkpoint; final per-epoch losses are returned through the out
 * pointers (any of which may be NULL) */
semkb_status semkb_train_cdg(const semkb_config* cfg, uint64_t seed, const char* checkpoint_path,
                             double* final_total, double* final_ce, double* final_nmse);

/* trains the text codec at one SNR point (one seed) and reports the final
 * batch loss and filter statistics; when out_dir is non-NULL the run's
 * metric and loss files are emitted there */
semkb_status semkb_train_cdfc(const semkb_config* cfg, uint64_t seed, double snr_db,
                              const char* out_dir, semkb_filter_stats* stats,
                              double* final_loss);

/* ---- sweeps ---- */

/* runs the configured sweep; workers = 0 uses hardware concurrency;
 * csi_or_null substitutes a loaded trace for the channel model */
semkb_status semkb_run(const semkb_config* cfg, int workers, const semkb_trace* csi_or_null,
                       semkb_record** out);
void semkb_record_free(semkb_record* record);

semkb_status semkb_record_metric_count(const semkb_record* record, size_t* count);
semkb_status semkb_record_metric(const semkb_record* record, size_t index,
                                 semkb_metric_row* out);
semkb_status semkb_record_filter(const semkb_record* record, semkb_filter_stats* out);
semkb_status semkb_record_wall_clock(const semkb_record* record, double* seconds);
semkb_status semkb_record_variant(const semkb_record* record, char* buf, size_t buf_len);

/* format: "jsonl", "csv", or "both" */
semkb_status semkb_record_emit(const semkb_record* record, const char* out_dir,
                               const char* format);

#ifdef __cplusplus
}
#endif

#endif /* SEMKB_H */
