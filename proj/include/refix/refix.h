/**
 * Copyright 2026 The ReFix Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

/* C interface of the refix engine. All functions are thread-compatible; the
 * last error message is kept per thread. Strings returned through const char*
 * stay valid until the owning handle is freed. */
#ifndef REFIX_REFIX_H
#define REFIX_REFIX_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define RFX_API __declspec(dllexport)
#else
#define RFX_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes double as process exit codes of the command-line tool. */
typedef enum rfx_status {
  RFX_OK = 0,
  RFX_ERR_INTERNAL = 1,
  RFX_ERR_CONFIG = 2,
  RFX_ERR_DATA = 3,
  RFX_ERR_NUMERIC = 4
} rfx_status;

typedef struct rfx_config rfx_config;
typedef struct rfx_dataset rfx_dataset;
typedef struct rfx_checkpoint rfx_checkpoint;
typedef struct rfx_report rfx_report;

RFX_API const char* rfx_version(void);
/* Message of the last failing call on this thread, "" if none. */
RFX_API const char* rfx_last_error(void);

/* ---- configuration ---- */
RFX_API rfx_status rfx_config_new(rfx_config** out);
RFX_API rfx_status rfx_config_load(rfx_config* config, const char* path);
RFX_API rfx_status rfx_config_set(rfx_config* config, const char* key, const char* value);
/* "key=value" */
RFX_API rfx_status rfx_config_assign(rfx_config* config, const char* assignment);
/* Applies RFX_SEED. */
RFX_API rfx_status rfx_config_apply_env(rfx_config* config);
/* Value of key, owned by the config handle. */
RFX_API rfx_status rfx_config_get(const rfx_config* config, const char* key, const char** value);
/* Full effective configuration as key = value lines. */
RFX_API const char* rfx_config_resolved(const rfx_config* config);
RFX_API rfx_status rfx_config_write_resolved(const rfx_config* config, const char* path);
/* Iterates the documented keys: returns 0 past the end. */
RFX_API int rfx_config_key_info(size_t index, const char** key, const char** default_value, const char** doc);
RFX_API void rfx_config_free(rfx_config* config);

/* ---- datasets ---- */
/* Writes <out_dir>/<stem>.manifest and its tensor files from kind, classes,
 * count, size, channels, seed, stem and out_dir. */
RFX_API rfx_status rfx_generate(const rfx_config* config, char* manifest_path, size_t capacity);
/* Splits the dataset key into <out_dir>/labeled.manifest and
 * <out_dir>/unlabeled.manifest and writes <out_dir>/split_report.json. */
RFX_API rfx_status rfx_split(const rfx_config* config);

RFX_API rfx_status rfx_dataset_load(const char* manifest_path, rfx_dataset** out);
RFX_API size_t rfx_dataset_size(const rfx_dataset* dataset);
RFX_API size_t rfx_dataset_classes(const rfx_dataset* dataset);
RFX_API void rfx_dataset_free(rfx_dataset* dataset);

/* Writes before/after tensor files of the first preview_count images of the
 * dataset key: <out_dir>/original.rfxt, weak.rfxt, strong.rfxt. */
RFX_API rfx_status rfx_augment_preview(const rfx_config* config);

/* ---- training ---- */
typedef struct rfx_train_summary {
  size_t iterations;
  double best_error;
  double median_error; /* median of the last median_window evaluations */
  double final_error;
  double final_ece;
} rfx_train_summary;

/* Called once per log row with the CSV line (without newline). */
typedef void (*rfx_row_callback)(const char* csv_row, void* user);

/* Runs training from the labeled/unlabeled/eval keys. Writes into out_dir:
 * log.csv, checkpoints/final (plus checkpoints/iter_<n> every
 * checkpoint_interval), summary.json and config.resolved. summary and
 * callback may be NULL. */
RFX_API rfx_status rfx_train(const rfx_config* config, rfx_row_callback callback, void* user,
                             rfx_train_summary* summary);

/* ---- evaluation ---- */
RFX_API rfx_status rfx_checkpoint_load(const char* path, rfx_checkpoint** out);
RFX_API size_t rfx_checkpoint_iteration(const rfx_checkpoint* checkpoint);
RFX_API void rfx_checkpoint_free(rfx_checkpoint* checkpoint);

/* EMA-weight evaluation of a checkpoint on a dataset. */
RFX_API rfx_status rfx_evaluate(const rfx_checkpoint* checkpoint, const rfx_dataset* dataset, size_t bins,
                                rfx_report** out);
RFX_API double rfx_report_top1_error(const rfx_report* report);
RFX_API double rfx_report_ece(const rfx_report* report);
RFX_API const char* rfx_report_json(const rfx_report* report);
/* Reliability bins: bin,lower,upper,count,mean_confidence,accuracy,weight */
RFX_API const char* rfx_report_bins_csv(const rfx_report* report);
/* Confidence histogram: bin,lower,upper,count,fraction */
RFX_API const char* rfx_report_histogram_csv(const rfx_report* report);
RFX_API void rfx_report_free(rfx_report* report);

#ifdef __cplusplus
}
#endif

#endif
