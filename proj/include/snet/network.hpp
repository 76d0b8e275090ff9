#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "snet/surround.hpp"
#include "snet/tensor.hpp"

namespace snet {

struct ConvParams {
  Tensor weight;  // [Cout, Cin, kh, kw]
  Tensor bias;    // [Cout]
};

// Residual dense block: every dense layer sees the concat of the block input
// and all earlier dense outputs, a 1x1 fusion maps back to the block width,
// and the result is added to the input.
struct RdbParams {
  std::vector<ConvParams> dense;  // 3x3 layers, each emitting `growth` channels
  ConvParams fuse;                // 1x1 back to the block width
};

// Lightweight denoiser: 5x5 head, two residual dense blocks, 5x5 tail, plus
// a global input-to-output residual.
struct LedParams {
  ConvParams head;  // 5x5, 3 -> led width
  RdbParams rdb1;
  RdbParams rdb2;
  ConvParams tail;  // 5x5, led width -> 3
};

// Adaptive retinex branch: a learned surround kernel splits the log-domain
// feature into illumination and reflectance, each side gets its own convs,
// and a 1x1 conv fuses the two enhanced halves.
struct ArBlockParams {
  AsfParams asf;
  ConvParams illum_conv;   // 3x3, C -> C
  ConvParams refl_conv1;   // 3x3 dilation 2, C -> C
  ConvParams refl_conv2;   // 3x3 dilation 2, C -> C
  ConvParams fusion_conv;  // 1x1, 2C -> C
};

// Ablation stand-in for a branch: a stack of plain 3x3 convs with ReLU
// between (none after the last).
struct PlainBlockParams {
  std::vector<ConvParams> convs;
};

// Channel attention: two bias-free length-9 1-D convolutions over the pooled
// channel vector, squashed to per-channel gates.
struct EcaParams {
  Tensor conv_a;
  Tensor conv_b;
};

struct NetworkConfig {
  int64_t channels = 32;      // branch / shallow feature width
  int64_t led_channels = 16;  // denoiser feature width
  int64_t led_depth = 4;      // dense layers per residual dense block
  int64_t led_growth = 8;     // channels each dense layer adds
  std::vector<int64_t> asf_sizes = {3, 7, 11, 15};  // one branch per entry
  bool use_eca = true;
  bool plain_blocks = false;  // swap branches for plain conv stacks
};

struct NetworkParams {
  NetworkConfig config;
  LedParams led;
  ConvParams shallow;  // 3x3, 3 -> branch width
  std::vector<ArBlockParams> blocks;    // empty when config.plain_blocks
  std::vector<PlainBlockParams> plain;  // empty otherwise
  EcaParams eca;  // kernels left undefined when !config.use_eca
  ConvParams out;  // 3x3, (branches + 1) * width -> 3
};

// He-initialized parameters (biases zero, surround raws all ones). Tensors
// are created in a fixed order from one seeded stream, so equal config and
// seed give bitwise-identical parameters.
NetworkParams make_network(const NetworkConfig& config, uint64_t seed);

Tensor rdb_forward(const Tensor& x, const RdbParams& p);

// tail(rdb2(rdb1(relu(head(img))))) + img; shape-preserving denoise.
Tensor led_forward(const Tensor& img, const LedParams& p);

struct IllumReflect {
  Tensor illum;
  Tensor reflect;
};

// illum = surround smoothing of x_log, reflect = x_log - illum, so
// illum + reflect reconstructs x_log.
IllumReflect split_illum_reflect(const Tensor& x_log,
                                 const SurroundKernel1D& k);

// Requires feat >= 0 (the log transform needs it; upstream ReLU provides it).
Tensor arblock_forward(const Tensor& feat, const ArBlockParams& p);
Tensor plain_block_forward(const Tensor& feat, const PlainBlockParams& p);

// Per-channel gates: sigmoid(conv_b * (conv_a * mean(feat))), "same" padded;
// output is feat scaled channelwise.
Tensor eca_forward(const Tensor& feat, const EcaParams& p);

struct NetworkOutput {
  Tensor enhanced;
  Tensor led_out;  // denoiser output, supervised separately during training
};

// Full pipeline: denoise, shallow features, parallel branches over the same
// features, channel attention over the concat, 3x3 projection back to RGB.
// training=false clamps `enhanced` to [0,1]; training=true leaves it raw so
// losses see unsaturated values.
NetworkOutput surroundnet_forward(const Tensor& img, const NetworkParams& p,
                                  bool training = false);

// Exact count of trainable scalars (conv weights and biases, surround raws,
// attention kernels).
int64_t param_count(const NetworkParams& p);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Canonical dotted names in a stable order: led.head.weight, ...,
// blocks.2.illum_conv.bias, eca.conv_a, out.weight, ...
std::vector<NamedTensor> named_parameters(const NetworkParams& p);

// Binary tensor container, fully little-endian: magic "SRND", version byte
// 0x01, u32 tensor count; per tensor a u16 name length, the UTF-8 name, u8
// rank, u32 dims, then raw IEEE-754 f32 values.
void write_tensor_file(const std::vector<NamedTensor>& tensors,
                       const std::string& path);
std::vector<NamedTensor> read_tensor_file(const std::string& path);

void save_checkpoint(const NetworkParams& p, const std::string& path);

// Copies values from the file into the matching parameters in place. The
// file's name set and shapes must agree exactly with named_parameters(p).
void load_checkpoint(NetworkParams& p, const std::string& path);

}  // namespace snet
