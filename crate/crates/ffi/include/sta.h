/* C interface for the sta speech-to-image pipeline. */

#ifndef STA_FFI_H
#define STA_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Return codes for every fallible entry point.
 */
typedef enum StaStatus {
  StaStatus_Ok = 0,
  /**
   * A required pointer was null.
   */
  StaStatus_NullPointer = 1,
  /**
   * A string argument was not valid UTF-8 or failed to parse.
   */
  StaStatus_InvalidArgument = 2,
  /**
   * The operation itself failed; see sta_last_error_message.
   */
  StaStatus_RuntimeError = 3,
} StaStatus;

/**
 * Opaque pipeline handle: resolved config plus directory roots.
 */
typedef struct StaPipeline StaPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the number of bytes written
 * including the terminator, or 0 if `buf` is null or `len` is 0.
 */
uintptr_t sta_last_error_message(char *buf, uintptr_t len);

/**
 * Library version as a static string; never freed by the caller.
 */
const char *sta_version(void);

/**
 * Create a pipeline from a config file path, or from built-in defaults
 * when `config_path` is null. Returns null on failure.
 *
 * # Safety
 * `config_path` must be null or a valid NUL-terminated string.
 */
struct StaPipeline *sta_pipeline_new(const char *config_path);

/**
 * Create a pipeline from config text in the `section.key = value` format.
 *
 * # Safety
 * `config_text` must be a valid NUL-terminated string.
 */
struct StaPipeline *sta_pipeline_new_from_text(const char *config_text);

/**
 * Override the master seed.
 *
 * # Safety
 * `pipeline` must be a live handle from a `sta_pipeline_new*` call.
 */
enum StaStatus sta_pipeline_set_seed(struct StaPipeline *pipeline, uint64_t seed);

/**
 * Destroy a pipeline handle. Null is a no-op.
 *
 * # Safety
 * `pipeline` must be null or a handle not yet freed.
 */
void sta_pipeline_free(struct StaPipeline *pipeline);

/**
 * Generate the synthetic corpus into the configured corpus directory
 * (or `dir_override` when non-null). `force` clears a non-empty target.
 *
 * # Safety
 * Pointer arguments must be null or valid NUL-terminated strings.
 */
enum StaStatus sta_gen_data(const struct StaPipeline *pipeline,
                            const char *dir_override,
                            bool force);

/**
 * Train one stage: "vqvae" | "encoder" | "diffusion" | "eval-classifier".
 *
 * # Safety
 * Pointer arguments must be valid per their types.
 */
enum StaStatus sta_train(const struct StaPipeline *pipeline, const char *stage, bool resume);

/**
 * Sample `count` images conditioned on a scene caption synthesized on
 * the fly. `scene` uses `shape=...,color=...,size=...,pos=N`; `language`
 * is "a" or "b".
 *
 * # Safety
 * Pointer arguments must be valid NUL-terminated strings.
 */
enum StaStatus sta_sample_scene(const struct StaPipeline *pipeline,
                                const char *scene,
                                const char *language,
                                uint32_t speaker,
                                uintptr_t count,
                                const char *out_dir);

/**
 * Sample `count` images conditioned on a caption file (.stac).
 *
 * # Safety
 * Pointer arguments must be valid NUL-terminated strings.
 */
enum StaStatus sta_sample_caption(const struct StaPipeline *pipeline,
                                  const char *caption_path,
                                  uintptr_t count,
                                  const char *out_dir);

/**
 * FID / IS / Recall@k report as a JSON string (free with
 * `sta_string_free`); null on failure. `k = 0` uses the configured
 * default cutoff.
 *
 * # Safety
 * Pointer arguments must be valid NUL-terminated strings.
 */
char *sta_evaluate_json(const struct StaPipeline *pipeline,
                        const char *generated_dir,
                        const char *reference_dir,
                        uintptr_t k,
                        bool allow_mismatch);

/**
 * Speech↔image retrieval table as a JSON string (free with
 * `sta_string_free`); null on failure.
 *
 * # Safety
 * `pipeline` must be a live handle.
 */
char *sta_retrieval_eval_json(const struct StaPipeline *pipeline);

/**
 * Free a string returned by a `*_json` function. Null is a no-op.
 *
 * # Safety
 * `s` must be null or a pointer produced by this library's `*_json`
 * functions, not yet freed.
 */
void sta_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STA_FFI_H */
