#ifndef CAPFLOW_H
#define CAPFLOW_H

/* Generated from the capflow-ffi crate by cbindgen; edit the Rust source instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a capflow call that does not return a handle.
 */
typedef enum CapflowStatus {
  /**
   * The call succeeded.
   */
  CAPFLOW_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CAPFLOW_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument was present but unusable (bad value, wrong range,
   * malformed UTF-8 path).
   */
  CAPFLOW_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Reading or writing a file failed.
   */
  CAPFLOW_STATUS_IO = 3,
  /**
   * A file was read but its contents are corrupt or unsupported.
   */
  CAPFLOW_STATUS_FORMAT = 4,
  /**
   * The pipeline itself failed on otherwise valid input.
   */
  CAPFLOW_STATUS_RUNTIME = 5,
} CapflowStatus;

/**
 * Finished analysis of one video: per-capillary records plus video-level
 * densities, queried through the `capflow_analysis_*` accessors.
 */
typedef struct CapflowAnalysis CapflowAnalysis;

/**
 * Configured entry point to the pipeline: holds the tuning parameters and
 * the optional patch classifier applied to region proposals.
 */
typedef struct CapflowAnalyzer CapflowAnalyzer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string. Never null; do not
 * free.
 */
const char *capflow_version(void);

/**
 * Message for the last error raised by a capflow call on the calling
 * thread, or an empty string. The pointer stays valid until this thread's
 * next capflow call. Never null; do not free.
 */
const char *capflow_last_error(void);

/**
 * Creates an analyzer. `config_path` may be null for built-in defaults, or
 * name a TOML tuning file. Returns null on failure. Release with
 * `capflow_analyzer_free`.
 *
 * # Safety
 * `config_path` must be null or a NUL-terminated string.
 */
struct CapflowAnalyzer *capflow_analyzer_new(const char *config_path);

/**
 * Loads a trained patch classifier into the analyzer; subsequent analyses
 * keep only region proposals the classifier accepts.
 *
 * # Safety
 * `analyzer` must come from `capflow_analyzer_new` and not be freed;
 * `model_path` must be a NUL-terminated string.
 */
enum CapflowStatus capflow_analyzer_set_model(struct CapflowAnalyzer *analyzer,
                                              const char *model_path);

/**
 * Releases an analyzer. Null is ignored.
 *
 * # Safety
 * `analyzer` must be null or a pointer from `capflow_analyzer_new` that
 * has not already been freed.
 */
void capflow_analyzer_free(struct CapflowAnalyzer *analyzer);

/**
 * Analyzes a directory of frames named `frame_%06d` (PNG or binary PPM).
 * Returns a new analysis handle, or null on failure. Release with
 * `capflow_analysis_free`.
 *
 * # Safety
 * `analyzer` must be a live analyzer handle; `frames_dir` must be a
 * NUL-terminated string.
 */
struct CapflowAnalysis *capflow_analyze_dir(const struct CapflowAnalyzer *analyzer,
                                            const char *frames_dir);

/**
 * Analyzes `frame_count` frames of packed 8-bit RGB pixels (frame-major,
 * rows top to bottom, no padding between rows or frames). `pixels` must
 * hold `width * height * 3 * frame_count` bytes. Returns a new analysis
 * handle, or null on failure. Release with `capflow_analysis_free`.
 *
 * # Safety
 * `analyzer` must be a live analyzer handle and `pixels` must point at at
 * least the stated number of readable bytes.
 */
struct CapflowAnalysis *capflow_analyze_rgb8(const struct CapflowAnalyzer *analyzer,
                                             const uint8_t *pixels,
                                             size_t width,
                                             size_t height,
                                             size_t frame_count);

/**
 * Number of frames the analysis covered. Zero if `analysis` is null.
 *
 * # Safety
 * `analysis` must be null or a live analysis handle.
 */
size_t capflow_analysis_frame_count(const struct CapflowAnalysis *analysis);

/**
 * Number of capillaries tracked through the video. Zero if `analysis` is
 * null.
 *
 * # Safety
 * `analysis` must be null or a live analysis handle.
 */
size_t capflow_analysis_capillary_count(const struct CapflowAnalysis *analysis);

/**
 * Fraction of the field of view covered by detected capillaries, in
 * [0, 1]. Zero if `analysis` is null.
 *
 * # Safety
 * `analysis` must be null or a live analysis handle.
 */
float capflow_analysis_total_density(const struct CapflowAnalysis *analysis);

/**
 * Like `capflow_analysis_total_density`, but counting only capillaries
 * with measurable flow.
 *
 * # Safety
 * `analysis` must be null or a live analysis handle.
 */
float capflow_analysis_functional_density(const struct CapflowAnalysis *analysis);

/**
 * Full report as a JSON document. `video_id` may be null (a placeholder id
 * is used); `fps` is the capture rate recorded in the report. Returns a
 * newly allocated string to release with `capflow_string_free`, or null on
 * failure.
 *
 * # Safety
 * `analysis` must be a live analysis handle; `video_id` must be null or a
 * NUL-terminated string.
 */
char *capflow_analysis_report_json(const struct CapflowAnalysis *analysis,
                                   const char *video_id,
                                   float fps);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a pointer returned by a capflow function that
 * documents `capflow_string_free`, not yet freed.
 */
void capflow_string_free(char *s);

/**
 * Releases an analysis handle. Null is ignored.
 *
 * # Safety
 * `analysis` must be null or a pointer from an analyze call that has not
 * already been freed.
 */
void capflow_analysis_free(struct CapflowAnalysis *analysis);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAPFLOW_H */
