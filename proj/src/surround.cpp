#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "snet/error.hpp"
#include "snet/surround.hpp"

namespace snet {

namespace {

using Impl = std::shared_ptr<detail::TensorImpl>;

// Mirrors a half profile f(d), d = 0..half_size-1 (center first), into a
// normalized full kernel of length 2*half_size - 1.
template <class F>
SurroundKernel1D classical_kernel(int64_t half_size, F&& f) {
  if (half_size < 1) data_error("surround kernel: half size must be >= 1");
  const int64_t len = 2 * half_size - 1;
  std::vector<double> w(static_cast<size_t>(len));
  double total = 0.0;
  for (int64_t i = 0; i < len; ++i) {
    const int64_t d = std::llabs(i - (half_size - 1));
    w[static_cast<size_t>(i)] = f(static_cast<double>(d));
    total += w[static_cast<size_t>(i)];
  }
  std::vector<float> wf(static_cast<size_t>(len));
  for (int64_t i = 0; i < len; ++i)
    wf[static_cast<size_t>(i)] =
        static_cast<float>(w[static_cast<size_t>(i)] / total);
  return {Tensor::from_values({len}, std::move(wf)), half_size};
}

void check_kernel(const SurroundKernel1D& k, const char* op) {
  if (!k.weights.defined() || k.weights.rank() != 1 || k.half_size < 1 ||
      k.weights.dim(0) != 2 * k.half_size - 1)
    data_error(std::string(op) +
               ": kernel weights must be rank 1 with length 2*half_size-1");
}

}  // namespace

AsfParams make_asf_params(int64_t k) {
  if (k < 1) data_error("make_asf_params: length must be >= 1");
  return {Tensor::full({k}, 1.0f, /*requires_grad=*/true)};
}

SurroundKernel1D gaussian_kernel(double sigma, int64_t half_size) {
  if (!(sigma > 0.0)) data_error("gaussian_kernel: sigma must be positive");
  const double inv = 1.0 / (2.0 * sigma * sigma);
  return classical_kernel(half_size,
                          [inv](double d) { return std::exp(-d * d * inv); });
}

SurroundKernel1D inverse_square_kernel(int64_t half_size) {
  // The 1/r^2 profile diverges at r = 0; the center tap reuses the r = 1
  // value.
  return classical_kernel(half_size, [](double d) {
    const double r = std::max(d, 1.0);
    return 1.0 / (r * r);
  });
}

SurroundKernel1D exponential_kernel(double c, int64_t half_size) {
  if (!(c > 0.0)) data_error("exponential_kernel: c must be positive");
  return classical_kernel(half_size,
                          [c](double d) { return std::exp(-d / c); });
}

int64_t gaussian_auto_half_size(double sigma, double tail_ratio) {
  if (!(sigma > 0.0))
    data_error("gaussian_auto_half_size: sigma must be positive");
  if (!(tail_ratio > 0.0 && tail_ratio < 1.0))
    data_error("gaussian_auto_half_size: tail ratio must be in (0,1)");
  const double reach = sigma * std::sqrt(-2.0 * std::log(tail_ratio));
  return static_cast<int64_t>(std::ceil(reach)) + 1;
}

SurroundKernel1D build_asf_1d(const AsfParams& params) {
  if (!params.raw.defined() || params.raw.rank() != 1 || params.raw.dim(0) < 1)
    data_error("build_asf_1d: raw params must be rank 1 with length >= 1");
  const int64_t k = params.raw.dim(0);
  Tensor increasing = cumsum_last(abs(params.raw));
  Tensor sym = k > 1 ? concat({increasing,
                               flip_last(slice(increasing, 0, 0, k - 1))},
                              0)
                     : increasing;
  Tensor total = sum(sym);
  if (!(total.value() > 0.0f))
    numeric_error(
        "build_asf_1d: parameters are all zero, kernel cannot be normalized");
  return {div(sym, total), k};
}

Tensor asf_2d(const SurroundKernel1D& k) {
  check_kernel(k, "asf_2d");
  const int64_t len = k.weights.dim(0);
  Tensor out = Tensor::zeros({len, len});
  auto w = k.weights.values();
  auto o = out.values();
  for (int64_t i = 0; i < len; ++i)
    for (int64_t j = 0; j < len; ++j)
      o[i * len + j] = static_cast<float>(static_cast<double>(w[i]) *
                                          static_cast<double>(w[j]));
  return out;
}

Tensor apply_separable(const Tensor& feat, const SurroundKernel1D& k) {
  check_kernel(k, "apply_separable");
  if (!feat.defined() || feat.rank() != 4)
    data_error("apply_separable: feature tensor must be [N, C, H, W]");
  const int64_t N = feat.dim(0), C = feat.dim(1), H = feat.dim(2),
                W = feat.dim(3);
  const int64_t len = k.weights.dim(0);
  const int64_t r = k.half_size - 1;  // "same" padding per pass
  const int64_t planes = N * C;

  std::vector<double> kd(static_cast<size_t>(len));
  {
    auto wv = k.weights.values();
    for (int64_t i = 0; i < len; ++i) kd[static_cast<size_t>(i)] = wv[i];
  }

  // Horizontal pass into tmp, vertical pass into out; zero outside.
  std::vector<float> tmp(static_cast<size_t>(planes * H * W));
  Tensor out = Tensor::zeros({N, C, H, W});
  auto fv = feat.values();
  auto ov = out.values();
  for (int64_t p = 0; p < planes; ++p) {
    const float* src = &fv[p * H * W];
    float* mid = &tmp[static_cast<size_t>(p * H * W)];
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double acc = 0.0;
        const int64_t v0 = std::max<int64_t>(0, r - x);
        const int64_t v1 = std::min(len, W + r - x);
        for (int64_t v = v0; v < v1; ++v)
          acc = std::fma(kd[static_cast<size_t>(v)],
                         static_cast<double>(src[y * W + x + v - r]), acc);
        mid[y * W + x] = static_cast<float>(acc);
      }
    float* dst = &ov[p * H * W];
    for (int64_t y = 0; y < H; ++y) {
      const int64_t u0 = std::max<int64_t>(0, r - y);
      const int64_t u1 = std::min(len, H + r - y);
      for (int64_t x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int64_t u = u0; u < u1; ++u)
          acc = std::fma(kd[static_cast<size_t>(u)],
                         static_cast<double>(mid[(y + u - r) * W + x]), acc);
        dst[y * W + x] = static_cast<float>(acc);
      }
    }
  }

  const bool need_f = feat.requires_grad();
  const bool need_k = k.weights.requires_grad();
  if (Tape::active() != nullptr && (need_f || need_k)) {
    out.set_requires_grad(true);
    Impl fi = feat.impl(), wi = k.weights.impl(), oi = out.impl();
    auto mid_kept = std::make_shared<std::vector<float>>(std::move(tmp));
    Tape::active()->record(oi, [=]() {
      const auto& go = oi->grad_ref();
      const std::vector<float>& mid_all = *mid_kept;
      std::vector<double> gtmp(static_cast<size_t>(H * W));
      std::vector<double> gplane(need_f ? static_cast<size_t>(H * W) : 0);
      std::vector<double> dk(need_k ? static_cast<size_t>(len) : 0, 0.0);
      for (int64_t p = 0; p < planes; ++p) {
        const float* gout = &go[static_cast<size_t>(p * H * W)];
        const float* mid = &mid_all[static_cast<size_t>(p * H * W)];
        const float* src = &fi->values[static_cast<size_t>(p * H * W)];
        // Adjoint of the vertical pass: correlate gout with the flipped
        // kernel; also accumulate the kernel gradient against tmp.
        for (int64_t y = 0; y < H; ++y)
          for (int64_t x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int64_t u = 0; u < len; ++u) {
              const int64_t yy = y - u + r;  // gout row feeding tmp[y]
              if (yy < 0 || yy >= H) continue;
              acc = std::fma(kd[static_cast<size_t>(u)],
                             static_cast<double>(gout[yy * W + x]), acc);
            }
            gtmp[static_cast<size_t>(y * W + x)] = acc;
          }
        if (need_k)
          for (int64_t u = 0; u < len; ++u) {
            double acc = 0.0;
            for (int64_t y = 0; y < H; ++y) {
              const int64_t yy = y + u - r;  // tmp row used by out row y
              if (yy < 0 || yy >= H) continue;
              for (int64_t x = 0; x < W; ++x)
                acc = std::fma(static_cast<double>(gout[y * W + x]),
                               static_cast<double>(mid[yy * W + x]), acc);
            }
            dk[static_cast<size_t>(u)] += acc;
          }
        if (need_f) {
          for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
              double acc = 0.0;
              for (int64_t v = 0; v < len; ++v) {
                const int64_t xx = x - v + r;
                if (xx < 0 || xx >= W) continue;
                acc = std::fma(kd[static_cast<size_t>(v)],
                               gtmp[static_cast<size_t>(y * W + xx)], acc);
              }
              gplane[static_cast<size_t>(y * W + x)] = acc;
            }
          auto& gf = fi->grad_ref();
          float* gdst = &gf[static_cast<size_t>(p * H * W)];
          for (int64_t i = 0; i < H * W; ++i)
            gdst[i] += static_cast<float>(gplane[static_cast<size_t>(i)]);
        }
        if (need_k)
          for (int64_t v = 0; v < len; ++v) {
            double acc = 0.0;
            for (int64_t y = 0; y < H; ++y)
              for (int64_t x = 0; x < W; ++x) {
                const int64_t xx = x + v - r;  // src column used by tmp[y,x]
                if (xx < 0 || xx >= W) continue;
                acc = std::fma(gtmp[static_cast<size_t>(y * W + x)],
                               static_cast<double>(src[y * W + xx]), acc);
              }
            dk[static_cast<size_t>(v)] += acc;
          }
      }
      if (need_k) {
        auto& gw = wi->grad_ref();
        for (int64_t i = 0; i < len; ++i)
          gw[static_cast<size_t>(i)] += static_cast<float>(dk[static_cast<size_t>(i)]);
      }
    });
  }
  return out;
}

Tensor ssr(const Tensor& image, const SurroundKernel1D& k, double delta) {
  if (!image.defined() || image.rank() != 4)
    data_error("ssr: image must be [N, C, H, W]");
  float mn = std::numeric_limits<float>::infinity();
  {
    auto v = image.values();
    for (float x : v) mn = std::min(mn, x);
  }
  if (!(mn + static_cast<float>(delta) > 0.0f))
    data_error("ssr: image plus log offset must stay positive");
  Tensor logi = log(add(image, static_cast<float>(delta)));
  return sub(logi, apply_separable(logi, k));
}

Tensor msr(const Tensor& image, const std::vector<SurroundKernel1D>& kernels,
           const std::vector<double>& weights, double delta) {
  if (kernels.empty() || kernels.size() != weights.size())
    data_error("msr: need one weight per kernel");
  double total = 0.0;
  for (double w : weights) total += w;
  if (std::abs(total - 1.0) > 1e-6)
    data_error("msr: weights must sum to 1");
  Tensor out;
  for (size_t i = 0; i < kernels.size(); ++i) {
    Tensor r = mul(ssr(image, kernels[i], delta),
                   static_cast<float>(weights[i]));
    out = out.defined() ? add(out, r) : r;
  }
  return out;
}

std::vector<SurroundKernel1D> msr_default_kernels() {
  std::vector<SurroundKernel1D> ks;
  for (double sigma : {15.0, 50.0, 80.0})
    ks.push_back(gaussian_kernel(sigma, gaussian_auto_half_size(sigma)));
  return ks;
}

std::vector<double> msr_default_weights() {
  return {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
}

}  // namespace snet
