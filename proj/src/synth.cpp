#include "snet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "snet/error.hpp"

namespace snet {

namespace {

double sum_squares(const std::vector<double>& r) {
  double c = 0.0;
  for (double v : r) c += v * v;
  return c;
}

double norm2(const std::vector<double>& v) { return std::sqrt(sum_squares(v)); }

// Gaussian elimination with partial pivoting on the n x n system a * x = b.
// Returns false when a pivot collapses (singular system). a and b are copies.
bool solve_linear(std::vector<double> a, std::vector<double> b, int64_t n,
                  std::vector<double>& out) {
  for (int64_t col = 0; col < n; ++col) {
    int64_t pivot = col;
    for (int64_t row = col + 1; row < n; ++row) {
      if (std::fabs(a[row * n + col]) > std::fabs(a[pivot * n + col]))
        pivot = row;
    }
    if (std::fabs(a[pivot * n + col]) < 1e-300) return false;
    if (pivot != col) {
      for (int64_t k = col; k < n; ++k)
        std::swap(a[pivot * n + k], a[col * n + k]);
      std::swap(b[pivot], b[col]);
    }
    for (int64_t row = col + 1; row < n; ++row) {
      const double f = a[row * n + col] / a[col * n + col];
      if (f == 0.0) continue;
      for (int64_t k = col; k < n; ++k) a[row * n + k] -= f * a[col * n + k];
      b[row] -= f * b[col];
    }
  }
  out.assign(n, 0.0);
  for (int64_t row = n - 1; row >= 0; --row) {
    double s = b[row];
    for (int64_t k = row + 1; k < n; ++k) s -= a[row * n + k] * out[k];
    out[row] = s / a[row * n + row];
  }
  return true;
}

}  // namespace

Tensor darken(const Tensor& img, const DarkeningParams& p) {
  if (!img.defined()) usage_error("darken needs a defined image");
  if (!(p.alpha > 0.0) || !(p.beta > 0.0) || !(p.gamma > 0.0))
    usage_error("darkening parameters must all be positive");
  Tensor out = Tensor::zeros(img.shape());
  auto iv = img.values();
  auto ov = out.values();
  for (size_t i = 0; i < iv.size(); ++i) {
    const double v = iv[i];
    if (v < 0.0 || v > 1.0)
      data_error("darken expects image values in [0, 1]");
    const double d = p.beta * std::pow(p.alpha * v, p.gamma);
    ov[i] = static_cast<float>(std::clamp(d, 0.0, 1.0));
  }
  return out;
}

DarkeningParams sample_params(Rng& rng) {
  // Draw order is part of the seeded contract; do not reorder.
  DarkeningParams p;
  p.beta = rng.uniform(0.5, 1.0);
  p.alpha = rng.uniform(0.9, 1.0);
  p.gamma = rng.uniform(1.5, 5.0);
  return p;
}

LmResult lm_optimize(const LmVectorFn& residual_fn,
                     const LmVectorFn& jacobian_fn, std::vector<double> x0,
                     const LmConfig& cfg, const LmProjection& project) {
  if (!residual_fn || !jacobian_fn)
    usage_error("lm_optimize needs residual and jacobian callbacks");
  if (x0.empty()) usage_error("lm_optimize needs a non-empty start point");
  if (!(cfg.lambda0 > 0.0) || !(cfg.lambda_up > 1.0) ||
      !(cfg.lambda_down > 1.0) || !(cfg.lambda_cap >= cfg.lambda0) ||
      cfg.max_iterations < 1 || !(cfg.cost_tolerance >= 0.0) ||
      !(cfg.step_tolerance >= 0.0))
    usage_error("invalid Levenberg-Marquardt configuration");

  const int64_t n = static_cast<int64_t>(x0.size());
  std::vector<double> x = std::move(x0);
  if (project) project(x);

  std::vector<double> r = residual_fn(x);
  if (r.empty()) usage_error("residual callback returned no residuals");
  const int64_t m = static_cast<int64_t>(r.size());

  LmResult res;
  res.x = x;
  res.cost = sum_squares(r);
  double lambda = cfg.lambda0;

  std::vector<double> a(static_cast<size_t>(n) * n);
  std::vector<double> g(n), neg_g(n), delta(n), xc(n);

  while (res.iterations < cfg.max_iterations) {
    ++res.iterations;

    std::vector<double> jac = jacobian_fn(x);
    if (static_cast<int64_t>(jac.size()) != m * n)
      usage_error("jacobian callback returned " + std::to_string(jac.size()) +
                  " entries, expected " + std::to_string(m * n));

    // Normal equations: a = J^T J, g = J^T r, accumulated in doubles.
    std::fill(a.begin(), a.end(), 0.0);
    std::fill(g.begin(), g.end(), 0.0);
    for (int64_t i = 0; i < m; ++i) {
      const double* row = jac.data() + i * n;
      for (int64_t p = 0; p < n; ++p) {
        g[p] += row[p] * r[i];
        for (int64_t q = p; q < n; ++q) a[p * n + q] += row[p] * row[q];
      }
    }
    for (int64_t p = 0; p < n; ++p)
      for (int64_t q = 0; q < p; ++q) a[p * n + q] = a[q * n + p];

    // First-order optimality: nothing left to gain from any step.
    double gmax = 0.0;
    for (double v : g) gmax = std::max(gmax, std::fabs(v));
    if (gmax <= 1e-12 * std::max(1.0, res.cost)) {
      res.converged = true;
      break;
    }

    for (int64_t p = 0; p < n; ++p) neg_g[p] = -g[p];

    bool stepped = false;
    while (lambda <= cfg.lambda_cap) {
      std::vector<double> damped = a;
      for (int64_t p = 0; p < n; ++p)
        damped[p * n + p] += lambda * a[p * n + p];
      if (!solve_linear(std::move(damped), neg_g, n, delta)) {
        lambda *= cfg.lambda_up;
        continue;
      }

      for (int64_t p = 0; p < n; ++p) xc[p] = x[p] + delta[p];
      if (project) project(xc);
      std::vector<double> rc = residual_fn(xc);
      if (static_cast<int64_t>(rc.size()) != m)
        usage_error("residual callback changed the residual count");
      const double cost_c = sum_squares(rc);

      if (cost_c < res.cost) {
        const double gain = res.cost - cost_c;
        double moved = 0.0;
        for (int64_t p = 0; p < n; ++p) {
          const double d = xc[p] - x[p];
          moved += d * d;
        }
        moved = std::sqrt(moved);
        x = xc;
        r = std::move(rc);
        res.cost = cost_c;
        lambda = std::max(lambda / cfg.lambda_down, 1e-15);
        stepped = true;
        if (gain <= cfg.cost_tolerance ||
            moved <= cfg.step_tolerance * (cfg.step_tolerance + norm2(x)))
          res.converged = true;
        break;
      }
      lambda *= cfg.lambda_up;
    }

    if (!stepped) break;  // damping cap reached: singular or no descent
    if (res.converged) break;
  }

  res.x = x;
  return res;
}

FitResult fit_darkening_params(const Tensor& low, const Tensor& high,
                               const LmConfig& cfg, int64_t max_pixels,
                               uint64_t subsample_seed) {
  if (!low.defined() || !high.defined())
    usage_error("fit_darkening_params needs two defined images");
  if (low.shape() != high.shape())
    data_error("paired images must share a shape");
  if (max_pixels < 1) usage_error("max_pixels must be positive");

  auto lv = low.values();
  auto hv = high.values();
  const int64_t total = static_cast<int64_t>(lv.size());

  std::vector<double> l, h;
  if (total <= max_pixels) {
    l.assign(lv.begin(), lv.end());
    h.assign(hv.begin(), hv.end());
  } else {
    Rng rng(subsample_seed);
    l.reserve(max_pixels);
    h.reserve(max_pixels);
    for (int64_t i = 0; i < max_pixels; ++i) {
      const uint64_t idx = rng.bounded(static_cast<uint64_t>(total));
      l.push_back(lv[idx]);
      h.push_back(hv[idx]);
    }
  }

  // Floor the reference so log(alpha * h) stays finite in the Jacobian.
  const double floor_v = 1.0 / 255.0;
  for (double& v : h) v = std::max(v, floor_v);

  const int64_t m = static_cast<int64_t>(l.size());
  double mean = 0.0;
  for (double v : h) mean += v;
  mean /= static_cast<double>(m);
  double var = 0.0;
  for (double v : h) var += (v - mean) * (v - mean);
  var /= static_cast<double>(m);

  auto residual = [&](const std::vector<double>& p) {
    const double alpha = p[0], beta = p[1], gamma = p[2];
    std::vector<double> r(m);
    for (int64_t i = 0; i < m; ++i)
      r[i] = l[i] - beta * std::pow(alpha * h[i], gamma);
    return r;
  };
  auto jacobian = [&](const std::vector<double>& p) {
    const double alpha = p[0], beta = p[1], gamma = p[2];
    std::vector<double> j(static_cast<size_t>(m) * 3);
    for (int64_t i = 0; i < m; ++i) {
      const double base = alpha * h[i];
      const double pw = std::pow(base, gamma);
      j[i * 3 + 0] = -beta * gamma * pw / alpha;
      j[i * 3 + 1] = -pw;
      j[i * 3 + 2] = -beta * pw * std::log(base);
    }
    return j;
  };
  auto project = [](std::vector<double>& p) {
    for (double& v : p) v = std::clamp(v, 1e-6, 10.0);
  };

  LmResult lm = lm_optimize(residual, jacobian, {0.95, 0.75, 3.25}, cfg,
                            project);

  FitResult out;
  out.params = {lm.x[0], lm.x[1], lm.x[2]};
  out.rms = std::sqrt(lm.cost / static_cast<double>(m));
  out.iterations = lm.iterations;
  out.converged = lm.converged;
  out.ill_posed = var < 1e-10;  // a constant reference pins nothing down
  return out;
}

Tensor make_led_target(const Tensor& low, const Tensor& high) {
  const FitResult fit = fit_darkening_params(low, high);
  return darken(high, fit.params);
}

Tensor make_led_target(const Tensor& dark) { return dark; }

}  // namespace snet
