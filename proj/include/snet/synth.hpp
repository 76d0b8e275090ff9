#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "snet/rng.hpp"
#include "snet/tensor.hpp"

namespace snet {

// out = beta * (alpha * img)^gamma, a combined linear and gamma darkening.
struct DarkeningParams {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
};

// Applies the darkening pointwise and clamps to [0,1] (a no-op while
// alpha <= 1 and beta <= 1). img must lie in [0,1]; params must be positive.
Tensor darken(const Tensor& img, const DarkeningParams& p);

// beta ~ U(0.5,1), alpha ~ U(0.9,1), gamma ~ U(1.5,5), drawn in that order.
DarkeningParams sample_params(Rng& rng);

struct LmConfig {
  double lambda0 = 1e-3;       // initial damping
  double lambda_up = 10.0;     // rejection multiplier
  double lambda_down = 10.0;   // acceptance divisor
  double lambda_cap = 1e12;    // give up once damping passes this
  int64_t max_iterations = 200;
  double cost_tolerance = 1e-10;  // stop when an accepted step gains less
  double step_tolerance = 1e-8;   // stop when an accepted step moves less
};

struct LmResult {
  std::vector<double> x;
  double cost = 0.0;  // sum of squared residuals at x
  int64_t iterations = 0;
  bool converged = false;
};

using LmVectorFn =
    std::function<std::vector<double>(const std::vector<double>&)>;
using LmProjection = std::function<void(std::vector<double>&)>;

// Damped least squares: solve (J^T J + lambda * diag(J^T J)) d = -J^T r,
// accept the step only if the cost strictly decreases (damping /= down),
// otherwise raise the damping and retry. The accepted-cost sequence is
// non-increasing by construction. jacobian_fn returns the m x n Jacobian
// row-major. An optional projection keeps iterates inside a feasible box.
// Singular normal equations at every damping up to the cap end the run with
// converged = false and the last accepted iterate.
LmResult lm_optimize(const LmVectorFn& residual_fn,
                     const LmVectorFn& jacobian_fn, std::vector<double> x0,
                     const LmConfig& cfg, const LmProjection& project = {});

struct FitResult {
  DarkeningParams params;
  double rms = 0.0;  // root-mean-square residual over the fitted pixels
  int64_t iterations = 0;
  bool converged = false;
  bool ill_posed = false;  // constant reference image; best-effort params
};

// Least-squares recovery of the darkening triple from a (low, high) pair:
// residuals low_i - beta * (alpha * high_i)^gamma with an analytic Jacobian,
// high floored at 1/255 so the log term stays finite, parameters projected
// into [1e-6, 10] after every step, started from the sampling-range
// midpoints (0.95, 0.75, 3.25). Pairs larger than max_pixels are fitted on
// a seeded uniform subsample.
FitResult fit_darkening_params(const Tensor& low, const Tensor& high,
                               const LmConfig& cfg = {},
                               int64_t max_pixels = 65536,
                               uint64_t subsample_seed = 0);

// Real pair: noise-free denoiser target = darken(high, fit(low, high)).
Tensor make_led_target(const Tensor& low, const Tensor& high);

// Synthetic sample: the dark image is already noise-free, use it unchanged.
Tensor make_led_target(const Tensor& dark);

}  // namespace snet
