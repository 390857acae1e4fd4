#ifndef FACTLAB_FFI_H
#define FACTLAB_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by fallible calls.
 */
typedef enum FlStatus {
  FlOk = 0,
  FlNullArgument = 1,
  FlInvalidUtf8 = 2,
  FlIoError = 3,
  FlContractViolation = 4,
  FlInternalError = 5,
} FlStatus;

/**
 * Opaque model handle.
 */
typedef struct FlModel FlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *fl_version(void);

/**
 * Message for the most recent error on this thread, or null. Caller
 * frees the returned string with `fl_string_free`.
 */
char *fl_last_error_message(void);

/**
 * Frees a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must have been returned by a function in this library and not
 * freed before.
 */
void fl_string_free(char *s);

/**
 * Loads a model checkpoint. Returns null on failure (see
 * `fl_last_error_message`). Free with `fl_model_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated C string.
 */
struct FlModel *fl_model_load(const char *path);

/**
 * Frees a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must have come from `fl_model_load` and not been freed.
 */
void fl_model_free(struct FlModel *model);

/**
 * Context length of a loaded model, or 0 on null input.
 *
 * # Safety
 * `model` must be a live handle from `fl_model_load` or null.
 */
uintptr_t fl_model_context_len(const struct FlModel *model);

/**
 * Greedy generation for a question. Returns a freshly allocated string
 * (free with `fl_string_free`) or null on failure.
 *
 * # Safety
 * `model` must be a live handle; `question` a valid C string.
 */
char *fl_model_generate(const struct FlModel *model,
                        const char *question,
                        uintptr_t max_new_tokens);

/**
 * Geometric-mean per-token probability of `answer` given `question`,
 * written to `out`.
 *
 * # Safety
 * `model` must be a live handle; `question`/`answer` valid C strings;
 * `out` a valid pointer to an f32.
 */
enum FlStatus fl_model_normalized_prob(const struct FlModel *model,
                                       const char *question,
                                       const char *answer,
                                       float *out);

/**
 * ROUGE-L recall of `candidate` against `reference`, written to `out`.
 *
 * # Safety
 * `candidate`/`reference` must be valid C strings; `out` a valid f32
 * pointer.
 */
enum FlStatus fl_rouge_l_recall(const char *candidate, const char *reference, float *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* FACTLAB_FFI_H */
