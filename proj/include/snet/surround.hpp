#pragma once

#include <vector>

#include "snet/tensor.hpp"

namespace snet {

// Normalized, symmetric, center-peaked 1-D surround kernel of length
// 2*half_size - 1 (center at index half_size - 1). Classical constructors
// produce constant weights; build_asf_1d produces weights connected to the
// autodiff graph so they can be learned.
struct SurroundKernel1D {
  Tensor weights;  // rank 1, length 2*half_size - 1
  int64_t half_size = 0;
};

// Learnable input of the adaptive surround construction, length K.
struct AsfParams {
  Tensor raw;
};

// All-ones raw vector of length k, marked trainable.
AsfParams make_asf_params(int64_t k);

SurroundKernel1D gaussian_kernel(double sigma, int64_t half_size);
SurroundKernel1D inverse_square_kernel(int64_t half_size);
SurroundKernel1D exponential_kernel(double c, int64_t half_size);

// Smallest half size whose outermost Gaussian tap is below tail_ratio of the
// center tap.
int64_t gaussian_auto_half_size(double sigma, double tail_ratio = 1e-3);

// increasing = cumsum(|raw|); kernel = concat(increasing,
// reverse(increasing without its last entry)) normalized to sum 1.
// Differentiable end to end; all-zero raw leaves nothing to normalize and is
// a numeric error.
SurroundKernel1D build_asf_1d(const AsfParams& params);

// Outer product weights * weights^T as a rank-2 tensor (not differentiable).
Tensor asf_2d(const SurroundKernel1D& k);

// Depthwise surround smoothing: a horizontal then a vertical 1-D pass, each
// zero-padded by half_size - 1 per side ("same"). Equals full 2-D
// convolution with asf_2d(k), boundaries included. Differentiable in feat
// and in k.weights.
Tensor apply_separable(const Tensor& feat, const SurroundKernel1D& k);

// Single-scale Retinex reflectance:
//   R = log(image + delta) - surround_smooth(log(image + delta)).
// image values must stay positive after the offset.
Tensor ssr(const Tensor& image, const SurroundKernel1D& k,
           double delta = 1.0 / 255.0);

// Weighted sum of ssr over several kernels; weights must sum to 1.
Tensor msr(const Tensor& image, const std::vector<SurroundKernel1D>& kernels,
           const std::vector<double>& weights, double delta = 1.0 / 255.0);

// Baseline multi-scale configuration: sigma in {15, 50, 80}, equal weights,
// half sizes chosen by gaussian_auto_half_size.
std::vector<SurroundKernel1D> msr_default_kernels();
std::vector<double> msr_default_weights();

}  // namespace snet
