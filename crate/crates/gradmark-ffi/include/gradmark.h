#ifndef GRADMARK_H
#define GRADMARK_H

/* Generated by cbindgen from gradmark-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum GmStatus {
  GM_STATUS_OK = 0,
  GM_STATUS_NULL_POINTER = 1,
  GM_STATUS_INVALID_ARGUMENT = 2,
  GM_STATUS_IO = 3,
  GM_STATUS_DIMENSION = 4,
  GM_STATUS_NON_FINITE = 5,
  GM_STATUS_BUFFER_TOO_SMALL = 6,
  GM_STATUS_ORACLE_FAILURE = 7,
  GM_STATUS_INTERNAL = 8,
} GmStatus;

// Opaque watermark key handle.
typedef struct GmKey GmKey;

// Opaque model handle (checkpoint plus a prediction oracle).
typedef struct GmModel GmModel;

// Prediction callback for black-box extraction: fill `out_probs` with
// `classes` scores for the `dim`-length input `x`; return 0 on success.
// Called sequentially from the extraction thread.
typedef int32_t (*GmOracleFn)(void *user_data,
                              const double *x,
                              size_t dim,
                              double *out_probs,
                              size_t classes);

// Verification outcome with the exact binomial threshold.
typedef struct GmVerification {
  // Mismatched bits between the decoded and embedded signature.
  uint64_t n_error;
  // Maximum tolerated errors at the given significance threshold;
  // -1 when even zero errors is not significant.
  int64_t eta;
  // Exact null-model probability of at most `n_error` errors.
  double p_value;
  // 1 iff `n_error <= eta`.
  uint8_t verified;
} GmVerification;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy the last error message for this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length in bytes.
size_t gm_last_error(char *buf, size_t len);

// Generate a key with all parts drawn from a seeded generator.
enum GmStatus gm_key_generate_random(size_t n_bits,
                                     size_t carrier_size,
                                     size_t input_dim,
                                     size_t classes,
                                     uint64_t seed,
                                     struct GmKey **out);

// Generate a key bound to an identity message (SHA-256 + counter-mode
// expansion); identical messages produce identical keys.
enum GmStatus gm_key_generate_from_message(const char *message,
                                           size_t n_bits,
                                           size_t carrier_size,
                                           size_t input_dim,
                                           size_t classes,
                                           struct GmKey **out);

enum GmStatus gm_key_load(const char *path, struct GmKey **out);

enum GmStatus gm_key_save(const struct GmKey *key, const char *path);

void gm_key_free(struct GmKey *key);

size_t gm_key_n_bits(const struct GmKey *key);

size_t gm_key_carrier_size(const struct GmKey *key);

size_t gm_key_target_class(const struct GmKey *key);

// Copy the signature bits (0/1 bytes) into `out` (`len >= n_bits`).
enum GmStatus gm_key_bits(const struct GmKey *key, uint8_t *out, size_t len);

// Load a checkpoint file written by the toolkit.
enum GmStatus gm_model_load(const char *path, struct GmModel **out);

void gm_model_free(struct GmModel *model);

size_t gm_model_input_dim(const struct GmModel *model);

size_t gm_model_class_count(const struct GmModel *model);

// Class probabilities for one flat input (`x` has `dim` values, `out_probs`
// has room for `classes` values).
enum GmStatus gm_model_predict(const struct GmModel *model,
                               const double *x,
                               size_t dim,
                               double *out_probs,
                               size_t classes);

// Expected input gradient over the carrier set by backpropagation.
// `samples` holds `n` flat images of the key's target class, row-major.
// `out_gradient` has room for `carrier_size` values.
enum GmStatus gm_whitebox_gradient(const struct GmModel *model,
                                   const struct GmKey *key,
                                   const double *samples,
                                   size_t n,
                                   size_t dim,
                                   double *out_gradient,
                                   size_t gradient_len);

// Zeroth-order gradient estimate against a caller-supplied prediction
// callback: one query per sample plus one per carrier node per sample,
// `out_query_count` receives exactly n * (carrier_size + 1).
enum GmStatus gm_blackbox_gradient(GmOracleFn oracle,
                                   void *user_data,
                                   size_t input_dim,
                                   size_t classes,
                                   const struct GmKey *key,
                                   const double *samples,
                                   size_t n,
                                   double h,
                                   double *out_gradient,
                                   size_t gradient_len,
                                   uint64_t *out_query_count);

// Decode the signature bits (0/1 bytes) carried by a gradient vector.
enum GmStatus gm_decode(const struct GmKey *key,
                        const double *gradient,
                        size_t gradient_len,
                        uint8_t *out_bits,
                        size_t bits_len);

// Largest tolerated error count eta with null probability below tau;
// -1 when the pair is unusable.
enum GmStatus gm_error_threshold(size_t n_bits, double tau, int64_t *out_eta);

// Exact null-model probability of observing at most `n_error` mismatches.
double gm_p_value(size_t n_bits, size_t n_error);

// Decode a gradient vector and run the binomial ownership test.
enum GmStatus gm_verify(const struct GmKey *key,
                        const double *gradient,
                        size_t gradient_len,
                        double tau,
                        struct GmVerification *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* GRADMARK_H */
