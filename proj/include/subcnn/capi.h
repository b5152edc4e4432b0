/* C API for the subcategory-aware detection pipeline.
 *
 * The library is driven through an opaque run handle that wraps one
 * configuration. Create it from a JSON document (or NULL for defaults),
 * optionally override individual keys, then execute pipeline stages by name.
 * Every function returns a status code; the last failure message for the
 * calling thread is available via subcnn_last_error(). */
#ifndef SUBCNN_CAPI_H
#define SUBCNN_CAPI_H

#ifdef __cplusplus
extern "C" {
#endif

typedef enum subcnn_status {
  SUBCNN_OK = 0,
  SUBCNN_ERR_INVALID_ARGUMENT = 1, /* null pointer, bad config, unknown key */
  SUBCNN_ERR_RUNTIME = 2           /* a stage failed while running */
} subcnn_status;

/* Opaque handle holding one pipeline configuration. */
typedef struct subcnn_run subcnn_run;

/* Library version string, e.g. "1.0.0". Never NULL; do not free. */
const char* subcnn_version(void);

/* Message of the most recent failure on this thread. Never NULL (empty
 * string when nothing failed yet); do not free. */
const char* subcnn_last_error(void);

/* Creates a run from a JSON configuration document. NULL or "" gives the
 * built-in defaults. Unknown keys are rejected. On success *out_run owns the
 * handle; release it with subcnn_run_destroy(). */
subcnn_status subcnn_run_create(const char* config_json, subcnn_run** out_run);

/* Releases a handle. NULL is a no-op. */
void subcnn_run_destroy(subcnn_run* run);

/* Overrides one configuration key. Keys use dots for the nested training
 * block ("train.learning_rate"); values are parsed as JSON when possible and
 * taken as literal strings otherwise, so both "0.01" and "moderate" work. */
subcnn_status subcnn_run_set(subcnn_run* run, const char* key, const char* value);

/* Renders the effective configuration as a JSON document into *out_json.
 * Free the returned string with subcnn_string_free(). */
subcnn_status subcnn_run_config_json(const subcnn_run* run, char** out_json);

/* Executes one pipeline stage: gen-data, discover-subcats, train-rpn,
 * propose, train-det, detect, eval, or plot. Stages read their inputs from
 * the paths in the configuration and write their artifacts (plus an echo of
 * the effective configuration) under the configured output directory. */
subcnn_status subcnn_run_stage(subcnn_run* run, const char* stage);

/* Frees a string returned by this library. NULL is a no-op. */
void subcnn_string_free(char* s);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* SUBCNN_CAPI_H */
