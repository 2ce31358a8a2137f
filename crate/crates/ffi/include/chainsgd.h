#ifndef CHAINSGD_H
#define CHAINSGD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ChainsgdStatus {
  CHAINSGD_STATUS_OK = 0,
  CHAINSGD_STATUS_NULL_POINTER = 1,
  CHAINSGD_STATUS_INVALID_ARGUMENT = 2,
  CHAINSGD_STATUS_STEP_SIZE_TOO_LARGE = 3,
  CHAINSGD_STATUS_UNAVAILABLE = 4,
  CHAINSGD_STATUS_NUMERICAL = 5,
  CHAINSGD_STATUS_IO = 6,
  CHAINSGD_STATUS_PANIC = 7,
} ChainsgdStatus;

typedef enum ChainsgdRegularizer {
  CHAINSGD_REGULARIZER_NONE = 0,
  CHAINSGD_REGULARIZER_L2 = 1,
  CHAINSGD_REGULARIZER_NONCONVEX_SMOOTH = 2,
} ChainsgdRegularizer;

typedef enum ChainsgdRegime {
  CHAINSGD_REGIME_FREQUENT_ZERO_MEAN = 0,
  CHAINSGD_REGIME_FREQUENT_BIASED_BACKWARD = 1,
  CHAINSGD_REGIME_INTERMITTENT_FORWARD = 2,
} ChainsgdRegime;

typedef enum ChainsgdCoefficient {
  CHAINSGD_COEFFICIENT_VAR_DELTA = 0,
  CHAINSGD_COEFFICIENT_VAR_EPS = 1,
  CHAINSGD_COEFFICIENT_BIAS_DELTA = 2,
  CHAINSGD_COEFFICIENT_BIAS_DELTA_TILDE = 3,
  CHAINSGD_COEFFICIENT_BIAS_EPS = 4,
} ChainsgdCoefficient;

typedef enum ChainsgdAssumption {
  CHAINSGD_ASSUMPTION_NONCONVEX = 0,
  CHAINSGD_ASSUMPTION_PL = 1,
} ChainsgdAssumption;

/**
 * Opaque: coefficient vectors for one set of constants.
 */
typedef struct ChainsgdCoefficients ChainsgdCoefficients;

/**
 * Opaque: a chain plus its data.
 */
typedef struct ChainsgdProblem ChainsgdProblem;

/**
 * Opaque: a finished run.
 */
typedef struct ChainsgdTrace ChainsgdTrace;

typedef struct ChainsgdGdBias {
  double final_iterate;
  double fixed_point;
  double gap;
  double contraction_factor;
  bool contracting;
  bool diverged;
} ChainsgdGdBias;

typedef struct ChainsgdTop1Params {
  /**
   * Row-major 2×2 matrix.
   */
  double a[4];
  double s;
  double gamma;
  double beta;
  uint64_t horizon;
  double threshold;
} ChainsgdTop1Params;

typedef struct ChainsgdTop1Verdict {
  double clean_final_norm;
  double compressed_min_norm;
  bool compressed_diverged;
  bool clean_converged;
  bool compressed_stalls;
} ChainsgdTop1Verdict;

typedef struct ChainsgdSigmoidBias {
  double bias;
  double mc_bias;
  double mc_std_error;
  bool mc_agrees;
} ChainsgdSigmoidBias;

typedef struct ChainsgdConstants {
  size_t n_layers;
  double c_grad;
  double c_hess;
  double l_f;
  double l_grad;
  double l_hess;
  double l_loss;
  /**
   * Nonpositive means "not strongly convex".
   */
  double mu;
  double sigma;
} ChainsgdConstants;

typedef struct ChainsgdChannel {
  double count;
  double limit;
  double ratio;
  bool admissible;
} ChainsgdChannel;

typedef struct ChainsgdAdmissibility {
  struct ChainsgdChannel forward;
  struct ChainsgdChannel backward;
} ChainsgdAdmissibility;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *chainsgd_last_error(void);

const char *chainsgd_version(void);

/**
 * Logistic chain over synthetic data; `*out` receives a new handle.
 */
enum ChainsgdStatus chainsgd_problem_logistic(size_t dim,
                                              size_t samples,
                                              enum ChainsgdRegularizer regularizer,
                                              double rho,
                                              uint64_t seed,
                                              struct ChainsgdProblem **out);

void chainsgd_problem_free(struct ChainsgdProblem *problem);

/**
 * One run under a regime plan (`interval` is read only by the intermittent
 * regime). Uses the default run settings otherwise, starting from zero.
 */
enum ChainsgdStatus chainsgd_run(const struct ChainsgdProblem *problem,
                                 enum ChainsgdRegime regime,
                                 double sigma_f,
                                 double sigma_b,
                                 uint64_t interval,
                                 double step_size,
                                 uint64_t horizon,
                                 uint64_t seed,
                                 struct ChainsgdTrace **out);

void chainsgd_trace_free(struct ChainsgdTrace *trace);

/**
 * Number of recorded metric samples.
 */
enum ChainsgdStatus chainsgd_trace_len(const struct ChainsgdTrace *trace, size_t *out);

/**
 * Copies up to `capacity` gradient norms into `buffer`; `*written` gets the count.
 */
enum ChainsgdStatus chainsgd_trace_grad_norms(const struct ChainsgdTrace *trace,
                                              double *buffer,
                                              size_t capacity,
                                              size_t *written);

/**
 * Stable gradient norm, and the stable iteration or `-1` when not reached.
 */
enum ChainsgdStatus chainsgd_trace_stability(const struct ChainsgdTrace *trace,
                                             double *stable_gradient_norm,
                                             int64_t *stable_iteration);

/**
 * Event counts `(Q_δ, Q_ε)` and the divergence flag.
 */
enum ChainsgdStatus chainsgd_trace_events(const struct ChainsgdTrace *trace,
                                          uint64_t *q_delta,
                                          uint64_t *q_eps,
                                          bool *diverged);

enum ChainsgdStatus chainsgd_gd_bias(double delta,
                                     double gamma,
                                     uint64_t horizon,
                                     double x0,
                                     struct ChainsgdGdBias *out);

/**
 * Fills `params` with the plain (`momentum == false`) or momentum setting.
 */
enum ChainsgdStatus chainsgd_top1_default_params(bool momentum, struct ChainsgdTop1Params *params);

/**
 * Runs the Top-1 construction. `clean` and `compressed` may be null; when not,
 * they receive new trace handles.
 */
enum ChainsgdStatus chainsgd_top1(const struct ChainsgdTop1Params *params,
                                  struct ChainsgdTop1Verdict *verdict,
                                  struct ChainsgdTrace **clean,
                                  struct ChainsgdTrace **compressed);

enum ChainsgdStatus chainsgd_sigmoid_bias(double a,
                                          size_t draws,
                                          uint64_t seed,
                                          struct ChainsgdSigmoidBias *out);

enum ChainsgdStatus chainsgd_coefficients(const struct ChainsgdConstants *constants,
                                          struct ChainsgdCoefficients **out);

void chainsgd_coefficients_free(struct ChainsgdCoefficients *coefficients);

/**
 * `C_v = max{1, C_∇f^N}`.
 */
enum ChainsgdStatus chainsgd_coefficients_c_v(const struct ChainsgdCoefficients *h, double *out);

/**
 * Entry `index` (0-based, `0..N-1`) of one coefficient vector. Index `i`
 * refers to layer `i + 1` for the `δ` vectors and to layer `i + 2` for the
 * `ε` vectors.
 */
enum ChainsgdStatus chainsgd_coefficients_get(const struct ChainsgdCoefficients *h,
                                              enum ChainsgdCoefficient which,
                                              size_t index,
                                              double *out);

enum ChainsgdStatus chainsgd_admissibility(enum ChainsgdAssumption assumption,
                                           bool zero_mean,
                                           uint64_t q_delta,
                                           uint64_t q_eps,
                                           uint64_t horizon,
                                           double slack,
                                           struct ChainsgdAdmissibility *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHAINSGD_H */
