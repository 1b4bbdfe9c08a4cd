/* anchormark C ABI: multi-bit image watermarking over invariant features. */

#ifndef ANCHORMARK_H
#define ANCHORMARK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum AmStatus {
  AM_OK = 0,
  AM_ERR_ARGUMENT = 1,
  AM_ERR_IO = 2,
  AM_ERR_FORMAT = 3,
  AM_ERR_DIMENSION = 4,
  AM_ERR_NUMERIC = 5,
  AM_ERR_NULL_POINTER = 6,
  AM_ERR_BUFFER_TOO_SMALL = 7,
} AmStatus;

/**
 * Opaque feature-extractor handle (backbone plus optional projector).
 */
typedef struct AmExtractor AmExtractor;

/**
 * Opaque secret-key handle.
 */
typedef struct AmKey AmKey;

/**
 * Embedding options; zero/negative fields fall back to defaults.
 */
typedef struct AmEmbedOptions {
  uint32_t iterations;
  double lambda_w;
  double mu_margin;
  double step_size;
  double target_psnr_db;
  uint64_t seed;
} AmEmbedOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version string; static storage, do not free.
 */
const char *am_version(void);

/**
 * Copy the thread-local message for the most recent failure into `buf`.
 * Returns the full message length (excluding NUL); the copy is truncated
 * to `cap - 1` bytes.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes (or be NULL to query the length).
 */
uintptr_t am_last_error(char *buf, uintptr_t cap);

/**
 * Generate an orthonormal secret key (k message bits in a d-dimensional
 * feature space), deterministic in `seed`.
 *
 * # Safety
 * `out` must be a valid pointer; the result must be freed with
 * [`am_key_free`].
 */
enum AmStatus am_key_generate(uint64_t seed, uint32_t k, uint32_t d, struct AmKey **out);

/**
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum AmStatus am_key_load(const char *path, struct AmKey **out);

/**
 * # Safety
 * `key` must come from this library; `path` must be a valid string.
 */
enum AmStatus am_key_save(const struct AmKey *key, const char *path);

/**
 * # Safety
 * `key` must be a valid handle or NULL.
 */
uint32_t am_key_bits(const struct AmKey *key);

/**
 * # Safety
 * `key` must be a valid handle or NULL.
 */
uint32_t am_key_dim(const struct AmKey *key);

/**
 * # Safety
 * `key` must come from this library and not already be freed.
 */
void am_key_free(struct AmKey *key);

/**
 * Create a stub-backbone extractor. With a checkpoint path the features are
 * the trained projector's output; otherwise raw normalized backbone
 * features.
 *
 * # Safety
 * `checkpoint_path` may be NULL; `out` must be valid; free the handle with
 * [`am_extractor_free`].
 */
enum AmStatus am_extractor_new_stub(uint64_t seed,
                                    uint32_t dim,
                                    const char *checkpoint_path,
                                    struct AmExtractor **out);

/**
 * # Safety
 * `ex` must be a valid handle or NULL.
 */
uint32_t am_extractor_dim(const struct AmExtractor *ex);

/**
 * # Safety
 * `ex` must come from this library and not already be freed.
 */
void am_extractor_free(struct AmExtractor *ex);

/**
 * Embed `message_bits` into the image file and write the marked PNG.
 *
 * # Safety
 * All pointers must be valid; `opts` may be NULL for defaults.
 */
enum AmStatus am_embed_file(const struct AmExtractor *ex,
                            const struct AmKey *key,
                            const char *image_path,
                            const char *message_bits,
                            const char *out_path,
                            const struct AmEmbedOptions *opts);

/**
 * Extract the message from an image file into `bits_out` as a
 * NUL-terminated bitstring; `bits_cap` must be at least k + 1.
 *
 * # Safety
 * All pointers must be valid and `bits_out` must hold `bits_cap` bytes.
 */
enum AmStatus am_extract_file(const struct AmExtractor *ex,
                              const struct AmKey *key,
                              const char *image_path,
                              char *bits_out,
                              uintptr_t bits_cap);

/**
 * PSNR in dB between two image files (both resized to the working size).
 *
 * # Safety
 * All pointers must be valid.
 */
enum AmStatus am_psnr_files(const char *path_a, const char *path_b, double *out_db);

/**
 * Fraction of matching bits between two bitstrings; returns -1.0 on error.
 *
 * # Safety
 * Both pointers must be valid NUL-terminated strings.
 */
double am_bit_accuracy(const char *bits_a, const char *bits_b);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANCHORMARK_H */
