#include "snet/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>
#include <utility>

#include "snet/error.hpp"
#include "snet/rng.hpp"

namespace snet {

namespace {

Tensor conv3x3(const Tensor& x, const ConvParams& p) {
  return conv2d(x, p.weight, p.bias, Pad2{1, 1, 1, 1});
}

Tensor conv5x5(const Tensor& x, const ConvParams& p) {
  return conv2d(x, p.weight, p.bias, Pad2{2, 2, 2, 2});
}

Tensor conv3x3_dil2(const Tensor& x, const ConvParams& p) {
  return conv2d(x, p.weight, p.bias, Pad2{2, 2, 2, 2}, 2);
}

Tensor conv1x1(const Tensor& x, const ConvParams& p) {
  return conv2d(x, p.weight, p.bias);
}

}  // namespace

NetworkParams make_network(const NetworkConfig& config, uint64_t seed) {
  if (config.channels < 1 || config.led_channels < 1 || config.led_depth < 1 ||
      config.led_growth < 1)
    usage_error("network widths and depths must be positive");
  if (config.asf_sizes.empty())
    usage_error("network needs at least one branch");
  for (int64_t k : config.asf_sizes)
    if (k < 1) usage_error("surround size must be positive");

  Rng rng(seed);
  // Tensors are drawn from `rng` in member-declaration order; changing the
  // order changes which values land where and breaks seed reproducibility.
  auto conv = [&rng](int64_t cout, int64_t cin, int64_t kh, int64_t kw) {
    std::vector<float> w(static_cast<size_t>(cout * cin * kh * kw));
    const double scale = std::sqrt(2.0 / static_cast<double>(cin * kh * kw));
    for (float& v : w) v = static_cast<float>(scale * rng.normal());
    ConvParams p;
    p.weight = Tensor::from_values({cout, cin, kh, kw}, std::move(w), true);
    p.bias = Tensor::zeros({cout}, true);
    return p;
  };
  auto rdb = [&](int64_t width) {
    RdbParams r;
    int64_t cin = width;
    for (int64_t i = 0; i < config.led_depth; ++i) {
      r.dense.push_back(conv(config.led_growth, cin, 3, 3));
      cin += config.led_growth;
    }
    r.fuse = conv(width, cin, 1, 1);
    return r;
  };

  NetworkParams p;
  p.config = config;
  p.led.head = conv(config.led_channels, 3, 5, 5);
  p.led.rdb1 = rdb(config.led_channels);
  p.led.rdb2 = rdb(config.led_channels);
  p.led.tail = conv(3, config.led_channels, 5, 5);
  p.shallow = conv(config.channels, 3, 3, 3);
  const int64_t c = config.channels;
  for (int64_t k : config.asf_sizes) {
    if (config.plain_blocks) {
      PlainBlockParams b;
      for (int i = 0; i < 3; ++i) b.convs.push_back(conv(c, c, 3, 3));
      p.plain.push_back(std::move(b));
    } else {
      ArBlockParams b;
      b.asf = make_asf_params(k);
      b.illum_conv = conv(c, c, 3, 3);
      b.refl_conv1 = conv(c, c, 3, 3);
      b.refl_conv2 = conv(c, c, 3, 3);
      b.fusion_conv = conv(c, 2 * c, 1, 1);
      p.blocks.push_back(std::move(b));
    }
  }
  if (config.use_eca) {
    auto kernel1d = [&rng]() {
      std::vector<float> w(9);
      const double scale = std::sqrt(2.0 / 9.0);
      for (float& v : w) v = static_cast<float>(scale * rng.normal());
      return Tensor::from_values({9}, std::move(w), true);
    };
    p.eca.conv_a = kernel1d();
    p.eca.conv_b = kernel1d();
  }
  const int64_t branches = static_cast<int64_t>(config.asf_sizes.size());
  p.out = conv(3, (branches + 1) * c, 3, 3);
  return p;
}

Tensor rdb_forward(const Tensor& x, const RdbParams& p) {
  std::vector<Tensor> feats{x};
  for (const ConvParams& layer : p.dense)
    feats.push_back(relu(conv3x3(concat(feats, 1), layer)));
  return add(conv1x1(concat(feats, 1), p.fuse), x);
}

Tensor led_forward(const Tensor& img, const LedParams& p) {
  Tensor h = relu(conv5x5(img, p.head));
  h = rdb_forward(h, p.rdb1);
  h = rdb_forward(h, p.rdb2);
  return add(conv5x5(h, p.tail), img);
}

IllumReflect split_illum_reflect(const Tensor& x_log,
                                 const SurroundKernel1D& k) {
  Tensor illum = apply_separable(x_log, k);
  return {illum, sub(x_log, illum)};
}

Tensor arblock_forward(const Tensor& feat, const ArBlockParams& p) {
  for (float v : feat.values())
    if (v < 0.0f)
      data_error("branch input must be non-negative for the log transform");
  Tensor x_log = log1p(feat);
  IllumReflect ir = split_illum_reflect(x_log, build_asf_1d(p.asf));
  Tensor ei = relu(conv3x3(ir.illum, p.illum_conv));
  Tensor er = relu(conv3x3_dil2(ir.reflect, p.refl_conv1));
  er = relu(conv3x3_dil2(er, p.refl_conv2));
  return conv1x1(concat({ei, er}, 1), p.fusion_conv);
}

Tensor plain_block_forward(const Tensor& feat, const PlainBlockParams& p) {
  if (p.convs.empty()) usage_error("plain block needs at least one conv");
  Tensor h = feat;
  for (size_t i = 0; i < p.convs.size(); ++i) {
    h = conv3x3(h, p.convs[i]);
    if (i + 1 < p.convs.size()) h = relu(h);
  }
  return h;
}

Tensor eca_forward(const Tensor& feat, const EcaParams& p) {
  const int64_t pa = (p.conv_a.dim(0) - 1) / 2;
  const int64_t pb = (p.conv_b.dim(0) - 1) / 2;
  Tensor g = global_avg_pool(feat);
  Tensor gate =
      sigmoid(conv1d_last(conv1d_last(g, p.conv_a, pa), p.conv_b, pb));
  return scale_channels(feat, gate);
}

NetworkOutput surroundnet_forward(const Tensor& img, const NetworkParams& p,
                                  bool training) {
  if (!img.defined() || img.rank() != 4 || img.dim(1) != 3)
    usage_error("network input must be [N, 3, H, W]");
  Tensor led_out = led_forward(img, p.led);
  Tensor s = relu(conv3x3(led_out, p.shallow));
  std::vector<Tensor> parts{s};
  if (p.config.plain_blocks) {
    for (const PlainBlockParams& b : p.plain)
      parts.push_back(plain_block_forward(s, b));
  } else {
    for (const ArBlockParams& b : p.blocks)
      parts.push_back(arblock_forward(s, b));
  }
  Tensor fused = concat(parts, 1);
  if (p.config.use_eca) fused = eca_forward(fused, p.eca);
  Tensor raw = conv3x3(fused, p.out);
  return {training ? raw : clamp01(raw), led_out};
}

std::vector<NamedTensor> named_parameters(const NetworkParams& p) {
  std::vector<NamedTensor> out;
  auto add_conv = [&out](const std::string& prefix, const ConvParams& c) {
    out.push_back({prefix + ".weight", c.weight});
    out.push_back({prefix + ".bias", c.bias});
  };
  auto add_rdb = [&](const std::string& prefix, const RdbParams& r) {
    for (size_t i = 0; i < r.dense.size(); ++i)
      add_conv(prefix + ".dense." + std::to_string(i), r.dense[i]);
    add_conv(prefix + ".fuse", r.fuse);
  };
  add_conv("led.head", p.led.head);
  add_rdb("led.rdb1", p.led.rdb1);
  add_rdb("led.rdb2", p.led.rdb2);
  add_conv("led.tail", p.led.tail);
  add_conv("shallow", p.shallow);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string b = "blocks." + std::to_string(i);
    out.push_back({b + ".asf.raw", p.blocks[i].asf.raw});
    add_conv(b + ".illum_conv", p.blocks[i].illum_conv);
    add_conv(b + ".refl_conv1", p.blocks[i].refl_conv1);
    add_conv(b + ".refl_conv2", p.blocks[i].refl_conv2);
    add_conv(b + ".fusion_conv", p.blocks[i].fusion_conv);
  }
  for (size_t i = 0; i < p.plain.size(); ++i) {
    const std::string b = "blocks." + std::to_string(i) + ".plain.";
    for (size_t j = 0; j < p.plain[i].convs.size(); ++j)
      add_conv(b + std::to_string(j), p.plain[i].convs[j]);
  }
  if (p.eca.conv_a.defined()) {
    out.push_back({"eca.conv_a", p.eca.conv_a});
    out.push_back({"eca.conv_b", p.eca.conv_b});
  }
  add_conv("out", p.out);
  return out;
}

int64_t param_count(const NetworkParams& p) {
  int64_t total = 0;
  for (const NamedTensor& nt : named_parameters(p)) total += nt.tensor.numel();
  return total;
}

namespace {

constexpr char kMagic[4] = {'S', 'R', 'N', 'D'};
constexpr uint8_t kVersion = 0x01;
constexpr int64_t kMaxNumel = int64_t{1} << 33;

void append_u16(std::string& buf, uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void append_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i)
    buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Cursor {
  const unsigned char* data;
  size_t size;
  size_t pos;
  const std::string& path;

  void need(size_t n) {
    if (size - pos < n) data_error("truncated tensor file: " + path);
  }
  uint8_t u8() {
    need(1);
    return data[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(data[pos] | (data[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = static_cast<uint32_t>(data[pos]) |
                 (static_cast<uint32_t>(data[pos + 1]) << 8) |
                 (static_cast<uint32_t>(data[pos + 2]) << 16) |
                 (static_cast<uint32_t>(data[pos + 3]) << 24);
    pos += 4;
    return v;
  }
};

}  // namespace

void write_tensor_file(const std::vector<NamedTensor>& tensors,
                       const std::string& path) {
  std::string buf;
  buf.append(kMagic, 4);
  buf.push_back(static_cast<char>(kVersion));
  append_u32(buf, static_cast<uint32_t>(tensors.size()));
  for (const NamedTensor& nt : tensors) {
    if (nt.name.size() > 0xffff)
      usage_error("tensor name too long: " + nt.name);
    if (!nt.tensor.defined()) usage_error("undefined tensor: " + nt.name);
    append_u16(buf, static_cast<uint16_t>(nt.name.size()));
    buf += nt.name;
    const Shape& shape = nt.tensor.shape();
    if (shape.size() > 0xff) usage_error("tensor rank too large: " + nt.name);
    buf.push_back(static_cast<char>(shape.size()));
    for (int64_t d : shape) append_u32(buf, static_cast<uint32_t>(d));
    for (float v : nt.tensor.values())
      append_u32(buf, std::bit_cast<uint32_t>(v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) data_error("cannot open for writing: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  f.flush();
  if (!f) data_error("write failed: " + path);
}

std::vector<NamedTensor> read_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) data_error("cannot open tensor file: " + path);
  std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(f),
                                   std::istreambuf_iterator<char>()};
  Cursor c{bytes.data(), bytes.size(), 0, path};
  c.need(4);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    data_error("not a tensor file (bad magic): " + path);
  c.pos = 4;
  if (c.u8() != kVersion)
    data_error("unsupported tensor file version: " + path);
  const uint32_t count = c.u32();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = c.u16();
    c.need(name_len);
    std::string name(reinterpret_cast<const char*>(c.data + c.pos), name_len);
    c.pos += name_len;
    const uint8_t rank = c.u8();
    Shape shape(rank);
    int64_t numel = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      const uint32_t dim = c.u32();
      if (dim == 0 || numel > kMaxNumel / dim)
        data_error("bad tensor dims in file: " + path);
      shape[d] = dim;
      numel *= dim;
    }
    c.need(static_cast<size_t>(numel) * 4);
    std::vector<float> vals(static_cast<size_t>(numel));
    for (int64_t j = 0; j < numel; ++j)
      vals[static_cast<size_t>(j)] = std::bit_cast<float>(c.u32());
    out.push_back(
        {std::move(name), Tensor::from_values(std::move(shape), std::move(vals))});
  }
  if (c.pos != c.size) data_error("trailing bytes in tensor file: " + path);
  return out;
}

void save_checkpoint(const NetworkParams& p, const std::string& path) {
  write_tensor_file(named_parameters(p), path);
}

void load_checkpoint(NetworkParams& p, const std::string& path) {
  std::vector<NamedTensor> file = read_tensor_file(path);
  std::vector<NamedTensor> params = named_parameters(p);
  if (file.size() != params.size())
    data_error("checkpoint holds " + std::to_string(file.size()) +
               " tensors, network expects " + std::to_string(params.size()) +
               ": " + path);
  std::unordered_map<std::string, Tensor> by_name;
  for (NamedTensor& nt : file)
    if (!by_name.emplace(nt.name, nt.tensor).second)
      data_error("duplicate tensor name " + nt.name + " in " + path);
  for (NamedTensor& dst : params) {
    auto it = by_name.find(dst.name);
    if (it == by_name.end())
      data_error("checkpoint is missing tensor " + dst.name + ": " + path);
    if (it->second.shape() != dst.tensor.shape())
      data_error("shape mismatch for " + dst.name + ": file has " +
                 shape_str(it->second.shape()) + ", network has " +
                 shape_str(dst.tensor.shape()));
    auto src = it->second.values();
    auto d = dst.tensor.values();
    std::copy(src.begin(), src.end(), d.begin());
  }
}

}  // namespace snet
