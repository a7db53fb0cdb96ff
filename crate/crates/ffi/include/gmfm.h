#ifndef GMFM_H
#define GMFM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum GmfmStatus {
  GMFM_STATUS_OK = 0,
  // A required pointer argument was null.
  GMFM_STATUS_NULL_POINTER = 1,
  // Malformed data, out-of-support values or an invalid configuration.
  GMFM_STATUS_INVALID_INPUT = 2,
  // The fit failed numerically.
  GMFM_STATUS_NUMERICAL = 3,
  // A buffer was too small; the required length was written back.
  GMFM_STATUS_BUFFER_TOO_SMALL = 4,
  // The library panicked. This is a bug.
  GMFM_STATUS_INTERNAL = 5,
} GmfmStatus;

typedef enum GmfmAlgo {
  GMFM_ALGO_TSAM = 0,
  GMFM_ALGO_MM = 1,
} GmfmAlgo;

typedef enum GmfmFamily {
  GMFM_FAMILY_GAUSSIAN = 0,
  GMFM_FAMILY_POISSON = 1,
  GMFM_FAMILY_LOGIT = 2,
  GMFM_FAMILY_PROBIT = 3,
  GMFM_FAMILY_TOBIT = 4,
} GmfmFamily;

// A data series with its family assignment.
typedef struct GmfmData GmfmData;

// A fitted model.
typedef struct GmfmFit GmfmFit;

// Solver settings. `gmfm_fit_options_default` fills in the library defaults.
typedef struct GmfmFitOptions {
  enum GmfmAlgo algo;
  size_t restarts;
  uint64_t seed;
  // Relative convergence tolerance; zero keeps the default.
  double tol;
} GmfmFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *gmfm_version(void);

// Message of the last failure on this thread. The pointer stays valid until
// the next failing call on the same thread.
const char *gmfm_last_error(void);

// Creates a data handle from `p1 * p2 * t` values with every cell in
// `family` (a `GmfmFamily` code).
//
// # Safety
// `values` must point to `p1 * p2 * t` readable doubles and `out` must be
// writable.
enum GmfmStatus gmfm_data_new(size_t p1,
                              size_t p2,
                              size_t t,
                              const double *values,
                              int32_t family,
                              struct GmfmData **out);

// Assigns `family` to the one-based inclusive block of rows, columns and
// slices. Later blocks override earlier ones.
//
// # Safety
// `data` must be a live handle from this library.
enum GmfmStatus gmfm_data_set_family_block(struct GmfmData *data,
                                           size_t row_first,
                                           size_t row_last,
                                           size_t col_first,
                                           size_t col_last,
                                           size_t slice_first,
                                           size_t slice_last,
                                           int32_t family);

// Reads a bundle directory holding `meta.json` and `data.csv`.
//
// # Safety
// `dir` must be a NUL-terminated UTF-8 path and `out` must be writable.
enum GmfmStatus gmfm_data_load_bundle(const char *dir, struct GmfmData **out);

// Writes the dimensions of a data handle; any output pointer may be null.
//
// # Safety
// `data` must be a live handle; non-null outputs must be writable.
enum GmfmStatus gmfm_data_dims(const struct GmfmData *data, size_t *p1, size_t *p2, size_t *t);

// # Safety
// `data` must be null or a handle from this library not yet freed.
void gmfm_data_free(struct GmfmData *data);

struct GmfmFitOptions gmfm_fit_options_default(void);

// Fits a model with `k1` row and `k2` column factors. A null `opts` uses
// the defaults.
//
// # Safety
// `data` must be a live handle, `opts` null or readable, `out` writable.
enum GmfmStatus gmfm_fit(const struct GmfmData *data,
                         size_t k1,
                         size_t k2,
                         const struct GmfmFitOptions *opts,
                         struct GmfmFit **out);

// Writes `p1, p2, T, k1, k2` of a fit; any output pointer may be null.
//
// # Safety
// `fit` must be a live handle; non-null outputs must be writable.
enum GmfmStatus gmfm_fit_dims(const struct GmfmFit *fit,
                              size_t *p1,
                              size_t *p2,
                              size_t *t,
                              size_t *k1,
                              size_t *k2);

// Maximised log-likelihood of the fit.
//
// # Safety
// `fit` must be a live handle and `out` writable.
enum GmfmStatus gmfm_fit_loglik(const struct GmfmFit *fit, double *out);

// Copies the `p1 x k1` row loadings, row-major. `len` holds the buffer
// capacity on entry and the number of doubles written (or needed) on exit.
//
// # Safety
// `fit` must be a live handle, `len` writable, `buf` null or writable for
// `*len` doubles.
enum GmfmStatus gmfm_fit_row_loadings(const struct GmfmFit *fit, double *buf, size_t *len);

// Copies the `p2 x k2` column loadings, row-major; see
// `gmfm_fit_row_loadings` for the buffer protocol.
//
// # Safety
// As for `gmfm_fit_row_loadings`.
enum GmfmStatus gmfm_fit_col_loadings(const struct GmfmFit *fit, double *buf, size_t *len);

// Copies the `T` factor matrices of `k1 x k2`, each row-major, back to back.
//
// # Safety
// As for `gmfm_fit_row_loadings`.
enum GmfmStatus gmfm_fit_factors(const struct GmfmFit *fit, double *buf, size_t *len);

// # Safety
// `fit` must be null or a handle from this library not yet freed.
void gmfm_fit_free(struct GmfmFit *fit);

// Chooses the factor numbers over `1..=l1_max` x `1..=l2_max`. A nonzero
// `warm` seeds each grid cell from its neighbour.
//
// # Safety
// `data` must be a live handle, `opts` null or readable, `k1` and `k2`
// writable.
enum GmfmStatus gmfm_select(const struct GmfmData *data,
                            size_t l1_max,
                            size_t l2_max,
                            int32_t warm,
                            const struct GmfmFitOptions *opts,
                            size_t *k1,
                            size_t *k2);

// Smallest canonical correlation between the columns of two row-major
// matrices with `rows` rows and `ka`, `kb` columns.
//
// # Safety
// `a` and `b` must hold `rows * ka` and `rows * kb` doubles; `out` writable.
enum GmfmStatus gmfm_ccor(const double *a,
                          const double *b,
                          size_t rows,
                          size_t ka,
                          size_t kb,
                          double *out);

// Log-likelihood of one observation `x` at natural parameter `pi`.
//
// # Safety
// `out` must be writable.
enum GmfmStatus gmfm_loglik_cell(int32_t family, double x, double pi, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GMFM_H */
