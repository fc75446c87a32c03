#ifndef ICB_H
#define ICB_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum IcbStatus {
  ICB_STATUS_OK = 0,
  ICB_STATUS_NULL_POINTER = 1,
  ICB_STATUS_INVALID_UTF8 = 2,
  ICB_STATUS_INVALID_ARGUMENT = 3,
  ICB_STATUS_SHAPE = 4,
  ICB_STATUS_CONFIG = 5,
  ICB_STATUS_IO = 6,
  ICB_STATUS_FORMAT = 7,
  ICB_STATUS_UNDEFINED_SCORE = 8,
  ICB_STATUS_BUFFER_TOO_SMALL = 9,
  ICB_STATUS_VERIFICATION_FAILED = 10,
  ICB_STATUS_PANIC = 11,
} IcbStatus;

// Opaque run configuration.
typedef struct IcbConfig IcbConfig;

// Opaque result of one insertion run.
typedef struct IcbResult IcbResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *icb_last_error(void);

// New configuration holding the defaults.
struct IcbConfig *icb_config_default(void);

// Parses `key=value` config text into a new handle.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum IcbStatus icb_config_parse(const char *text, struct IcbConfig **out);

// Reads a config file into a new handle.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum IcbStatus icb_config_load(const char *path, struct IcbConfig **out);

// Sets one key. The handle is unchanged when the result would be invalid.
//
// # Safety
// `cfg` must come from this library; `key` and `value` must be
// NUL-terminated strings.
enum IcbStatus icb_config_set(struct IcbConfig *cfg, const char *key, const char *value);

// # Safety
// `cfg` must be null or a handle from this library not yet freed.
void icb_config_free(struct IcbConfig *cfg);

// Runs one insertion in memory. Inputs come from the config's paths or,
// when none are set, from the seeded synthetic generator.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum IcbStatus icb_insert(const struct IcbConfig *cfg, struct IcbResult **out);

// Generated grid dimensions.
//
// # Safety
// `res` must be a live handle; the out pointers must be writable.
enum IcbStatus icb_result_dims(const struct IcbResult *res,
                               size_t *height,
                               size_t *width,
                               size_t *channels);

// Copies the generated latents (row-major `H × W × C`) into `buf`.
//
// # Safety
// `buf` must point to `len` writable floats.
enum IcbStatus icb_result_copy_generated(const struct IcbResult *res, float *buf, size_t len);

// Identity proxy score. Fails with `UndefinedScore` when the mask is empty.
//
// # Safety
// `res` must be a live handle; `score` must be writable.
enum IcbStatus icb_result_proxy_score(const struct IcbResult *res, double *score);

// Lower-case hex SHA-256 of the encoded generated tensor, NUL-terminated.
// `len` must be at least 65.
//
// # Safety
// `buf` must point to `len` writable bytes.
enum IcbStatus icb_result_sha256(const struct IcbResult *res, char *buf, size_t len);

// Writes `generated.icbt`, `alpha_trace.icbt` and `head_activation.icbt`
// into `dir`, creating it if needed.
//
// # Safety
// `res` must be a live handle; `dir` a NUL-terminated string.
enum IcbStatus icb_result_write(const struct IcbResult *res, const char *dir);

// # Safety
// `res` must be null or a handle from this library not yet freed.
void icb_result_free(struct IcbResult *res);

// Runs the identity suite. Returns `VerificationFailed` when any check
// fails; the report is then available through [`icb_last_error`].
enum IcbStatus icb_verify(size_t trials, uint64_t seed, bool inject_fault);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICB_H */
