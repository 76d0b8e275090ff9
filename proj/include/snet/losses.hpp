#pragma once

#include <vector>

#include "snet/tensor.hpp"

namespace snet {

// Deterministic map from an image to one or more feature maps for the
// perceptual loss. Implementations must be pure: identical inputs give
// identical features, and gradients flow through extract().
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<Tensor> extract(const Tensor& img) const = 0;
};

// Fixed 3-level low-pass pyramid: the image itself plus one and two rounds
// of depthwise 5x5 binomial smoothing. Needs no pretrained weights.
class PyramidExtractor final : public FeatureExtractor {
 public:
  std::vector<Tensor> extract(const Tensor& img) const override;
};

// 1 - mean windowed structural similarity; 11x11 Gaussian window with
// sigma 1.5, stability constants (0.01)^2 and (0.03)^2 for unit range,
// statistics over windows that fit entirely inside the image.
Tensor ssim_loss(const Tensor& x, const Tensor& y);

// Mean of sqrt((x - y)^2 + eps^2) with eps = 1e-3; smooth at zero residual
// and exactly eps when x == y.
Tensor charbonnier_loss(const Tensor& x, const Tensor& y);

// 1 - weighted sum of per-map texture (mean) and structure (covariance)
// similarity over the extractor's feature maps, global statistics per
// channel; weights uniform and summing to 1 across both term kinds.
Tensor dists_loss(const Tensor& x, const Tensor& y, const FeatureExtractor& f);

struct LossTerms {
  Tensor total;  // scalar graph root for backprop
  double l_ssim = 0.0, l_char = 0.0, l_dists = 0.0;  // enhanced-pair terms
  double l_h = 0.0;  // enhanced output vs normal-light target
  double l_l = 0.0;  // denoiser output vs clean low-light target
  double l_t = 0.0;  // l_h + l_l
};

// o: enhanced output, n: normal-light target; ol: denoiser output,
// cl: clean low-light target. The (ol, cl) pair contributes only when
// use_les is set.
LossTerms total_loss(const Tensor& o, const Tensor& n, const Tensor& ol,
                     const Tensor& cl, const FeatureExtractor& f,
                     bool use_les);

// 10*log10(peak^2 / MSE), capped at 100 dB when MSE < 1e-10.
double psnr(const Tensor& x, const Tensor& y, double peak = 1.0);

// 1 - ssim_loss as a plain number.
double ssim_index(const Tensor& x, const Tensor& y);

}  // namespace snet
