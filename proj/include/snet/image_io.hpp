#pragma once

#include <string>

#include "snet/tensor.hpp"

namespace snet {

// 8-bit binary PPM (magic P6, maxval 255) is the one supported raster
// format: lossless, self-describing, trivially portable. ASCII (P3) and
// deeper-than-8-bit files are rejected rather than silently converted.

// Reads to [1, 3, H, W] with values byte/255 in [0, 1].
Tensor read_image(const std::string& path);

// Writes a [1, 3, H, W] (or [3, H, W]) tensor; each sample is
// round(clamp(v, 0, 1) * 255).
void write_image(const std::string& path, const Tensor& img);

}  // namespace snet
