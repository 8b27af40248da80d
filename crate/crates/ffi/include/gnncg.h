#ifndef GNNCG_H
#define GNNCG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum GnncgStatus {
  GNNCG_STATUS_OK = 0,
  GNNCG_STATUS_NULL_ARGUMENT = 1,
  GNNCG_STATUS_INVALID_UTF8 = 2,
  GNNCG_STATUS_IO = 3,
  GNNCG_STATUS_PARSE = 4,
  GNNCG_STATUS_CONFIG = 5,
  GNNCG_STATUS_SHAPE = 6,
  GNNCG_STATUS_PLAN = 7,
  GNNCG_STATUS_EXECUTION = 8,
  /**
   * The run finished but a report check failed; the report is still written.
   */
  GNNCG_STATUS_CHECK_FAILED = 9,
  GNNCG_STATUS_PANIC = 10,
} GnncgStatus;

/**
 * Opaque graph handle.
 */
typedef struct GnncgGraph GnncgGraph;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *gnncg_version(void);

/**
 * Message of the last failed call on this thread (empty after success).
 * Valid until the next call on the same thread.
 */
const char *gnncg_last_error(void);

/**
 * Builds a graph from parallel `src`/`dst` arrays of length `num_edges`.
 *
 * # Safety
 * `src` and `dst` must point to `num_edges` readable values (or may be null
 * when `num_edges` is 0); `out` must be writable.
 */
enum GnncgStatus gnncg_graph_from_edges(size_t num_vertices,
                                        const size_t *src,
                                        const size_t *dst,
                                        size_t num_edges,
                                        struct GnncgGraph **out);

/**
 * Generates a synthetic graph from a `kind:param:param[:seed]` descriptor.
 *
 * # Safety
 * `descriptor` must be a nul-terminated string; `out` must be writable.
 */
enum GnncgStatus gnncg_graph_synthetic(const char *descriptor,
                                       uint64_t seed,
                                       struct GnncgGraph **out);

/**
 * # Safety
 * `g` must be a live handle or null.
 */
size_t gnncg_graph_num_vertices(const struct GnncgGraph *g);

/**
 * # Safety
 * `g` must be a live handle or null.
 */
size_t gnncg_graph_num_edges(const struct GnncgGraph *g);

/**
 * Releases a graph handle; null is ignored.
 *
 * # Safety
 * `g` must come from this library and not be used afterwards.
 */
void gnncg_graph_free(struct GnncgGraph *g);

/**
 * Compiles and runs a model on `g` and writes the JSON report to `*out_json`.
 *
 * `options_json` may be null for defaults. The report is written for
 * `GNNCG_STATUS_OK` and `GNNCG_STATUS_CHECK_FAILED`; otherwise `*out_json` is
 * set to null.
 *
 * # Safety
 * `g` must be a live handle, `options_json` null or nul-terminated, and
 * `out_json` writable.
 */
enum GnncgStatus gnncg_run(const struct GnncgGraph *g, const char *options_json, char **out_json);

/**
 * Releases a string returned by this library; null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void gnncg_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GNNCG_H */
