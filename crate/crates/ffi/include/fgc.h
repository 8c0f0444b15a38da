#ifndef FGC_H
#define FGC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum FgcStatus {
  FGC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  FGC_STATUS_NULL_POINTER = 1,
  /**
   * Bad argument, malformed input data or unreadable file.
   */
  FGC_STATUS_INVALID_INPUT = 2,
  /**
   * The checkpoint does not match this library's model.
   */
  FGC_STATUS_INCOMPATIBLE_CHECKPOINT = 3,
  /**
   * A computation produced NaN or infinity.
   */
  FGC_STATUS_NON_FINITE = 4,
  /**
   * The output buffer is too small; the required length was written.
   */
  FGC_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * Any other failure, including a caught panic.
   */
  FGC_STATUS_FAILURE = 6,
} FgcStatus;

/**
 * Mono audio at 44.1 kHz.
 */
typedef struct FgcAudio FgcAudio;

/**
 * Loaded model checkpoint.
 */
typedef struct FgcModel FgcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *fgc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fgc_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FgcStatus fgc_model_load(const char *path, struct FgcModel **out);

/**
 * # Safety
 * `model` must come from `fgc_model_load` and not be used afterwards. Null is ignored.
 */
void fgc_model_free(struct FgcModel *model);

/**
 * Number of control and editor branches in the checkpoint; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fgc_model_branch_count(const struct FgcModel *model);

/**
 * Sample a clip of `duration` seconds from comma-separated caption labels.
 *
 * # Safety
 * `model` must be a live handle, `caption` NUL-terminated, `out` valid.
 */
enum FgcStatus fgc_model_generate(const struct FgcModel *model,
                                  const char *caption,
                                  double duration,
                                  uint32_t steps,
                                  double cfg_scale,
                                  uint64_t seed,
                                  struct FgcAudio **out);

/**
 * Apply an instruction "action: label: start: end" with an editor branch.
 * `branch` may be null to pick the editor named after the action, or the only one.
 *
 * # Safety
 * `model` and `input` must be live handles, strings NUL-terminated, `out` valid.
 */
enum FgcStatus fgc_model_edit(const struct FgcModel *model,
                              const struct FgcAudio *input,
                              const char *spec,
                              const char *branch,
                              uint32_t steps,
                              double cfg_scale,
                              uint64_t seed,
                              struct FgcAudio **out);

/**
 * Wrap `len` samples in `[-1, 1]`; other rates are resampled to 44.1 kHz.
 *
 * # Safety
 * `samples` must point to `len` readable doubles and `out` be valid.
 */
enum FgcStatus fgc_audio_from_samples(const double *samples,
                                      size_t len,
                                      uint32_t sample_rate,
                                      struct FgcAudio **out);

/**
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum FgcStatus fgc_audio_read_wav(const char *path, struct FgcAudio **out);

/**
 * # Safety
 * `audio` must be a live handle and `path` NUL-terminated.
 */
enum FgcStatus fgc_audio_write_wav(const struct FgcAudio *audio, const char *path);

/**
 * Number of samples; 0 for a null handle.
 *
 * # Safety
 * `audio` must be null or a live handle.
 */
size_t fgc_audio_len(const struct FgcAudio *audio);

/**
 * Copy the samples into `out`. With a short buffer, returns
 * `BufferTooSmall` and writes the needed length to `out_len`.
 *
 * # Safety
 * `audio` must be a live handle, `out` writable for `capacity` doubles, `out_len` valid.
 */
enum FgcStatus fgc_audio_samples(const struct FgcAudio *audio,
                                 double *out,
                                 size_t capacity,
                                 size_t *out_len);

/**
 * # Safety
 * `audio` must come from this library and not be used afterwards. Null is ignored.
 */
void fgc_audio_free(struct FgcAudio *audio);

/**
 * Smoothed loudness curve in dB with the default settings, one value per frame.
 *
 * # Safety
 * As for `fgc_audio_samples`.
 */
enum FgcStatus fgc_extract_loudness(const struct FgcAudio *audio,
                                    double *out,
                                    size_t capacity,
                                    size_t *out_len);

/**
 * Per-frame f0 in Hz with the default pitch settings; unvoiced frames hold 0.
 *
 * # Safety
 * As for `fgc_audio_samples`.
 */
enum FgcStatus fgc_estimate_f0(const struct FgcAudio *audio,
                               double *out,
                               size_t capacity,
                               size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FGC_H */
