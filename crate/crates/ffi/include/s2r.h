#ifndef S2R_H
#define S2R_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum S2rStatus {
  S2R_STATUS_OK = 0,
  S2R_STATUS_NULL_ARGUMENT = 1,
  S2R_STATUS_INVALID_UTF8 = 2,
  S2R_STATUS_INVALID_ARGUMENT = 3,
  /**
   * the configuration file is unreadable or invalid
   */
  S2R_STATUS_CONFIG = 4,
  /**
   * a work-directory artifact (index, checkpoint) is missing
   */
  S2R_STATUS_MISSING_ARTIFACT = 5,
  S2R_STATUS_RUNTIME = 6,
  /**
   * no indexed query shares a token with the input
   */
  S2R_STATUS_NO_MATCH = 7,
  S2R_STATUS_PANIC = 8,
} S2rStatus;

/**
 * Opaque engine handle.
 */
typedef struct S2rEngine S2rEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads the engine described by a TOML run configuration whose work
 * directory already holds an index and trained checkpoints.
 *
 * # Safety
 * `config_path` is a NUL-terminated string; `out` is a valid pointer.
 */
enum S2rStatus s2r_engine_open(const char *config_path, struct S2rEngine **out);

/**
 * Generates a response to `query`. On success `*out_json` receives a JSON
 * object with the fields `q`, `rq`, `rr`, `skeleton`, `m`, `response`,
 * `logprob`, `normalized`, `gate_mean` and `similarity`.
 *
 * # Safety
 * `engine` comes from [`s2r_engine_open`]; `query` is a NUL-terminated
 * string; `out_json` is a valid pointer.
 */
enum S2rStatus s2r_engine_respond(const struct S2rEngine *engine,
                                  const char *query,
                                  char **out_json);

/**
 * # Safety
 * `engine` is null or comes from [`s2r_engine_open`] and is not used again.
 */
void s2r_engine_free(struct S2rEngine *engine);

/**
 * # Safety
 * `s` is null or a string returned by this library, not freed before.
 */
void s2r_string_free(char *s);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into the library on the same thread.
 */
const char *s2r_last_error(void);

/**
 * Jaccard similarity of the token sets of two whitespace-tokenized strings.
 *
 * # Safety
 * `a` and `b` are NUL-terminated strings; `out` is a valid pointer.
 */
enum S2rStatus s2r_jaccard(const char *a, const char *b, double *out);

/**
 * Distinct n-grams over total tokens for `count` whitespace-tokenized responses.
 *
 * # Safety
 * `responses` points to `count` NUL-terminated strings; `out` is a valid pointer.
 */
enum S2rStatus s2r_dist_n(const char *const *responses, size_t count, size_t n, double *out);

/**
 * Proxy skeleton of a retrieved response `rr` against the gold response `r`.
 * `stopwords` is a whitespace-separated list (may be empty). On success
 * `*out_json` receives `{"m": [0|1, ...], "t": "<skeleton tokens>"}`.
 *
 * # Safety
 * All strings are NUL-terminated; `out_json` is a valid pointer.
 */
enum S2rStatus s2r_proxy_skeleton(const char *r,
                                  const char *rr,
                                  const char *stopwords,
                                  char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* S2R_H */
