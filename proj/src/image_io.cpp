#include "snet/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "snet/error.hpp"

namespace snet {

namespace {

// Skips PNM whitespace and '#' comments (which run to end of line).
void skip_separators(const std::string& data, size_t& pos) {
  while (pos < data.size()) {
    const char c = data[pos];
    if (c == '#') {
      while (pos < data.size() && data[pos] != '\n') ++pos;
    } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n' ||
               c == '\f' || c == '\v') {
      ++pos;
    } else {
      break;
    }
  }
}

int64_t parse_int(const std::string& data, size_t& pos,
                  const std::string& path) {
  skip_separators(data, pos);
  const size_t start = pos;
  while (pos < data.size() && data[pos] >= '0' && data[pos] <= '9') ++pos;
  if (pos == start)
    data_error("malformed PPM header in " + path);
  int64_t v = 0;
  for (size_t i = start; i < pos; ++i) {
    v = v * 10 + (data[i] - '0');
    if (v > 1 << 30) data_error("absurd PPM dimension in " + path);
  }
  return v;
}

}  // namespace

Tensor read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) data_error("cannot open image " + path);
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (data.size() < 2 || data[0] != 'P')
    data_error("not a PPM file: " + path);
  if (data[1] == '3')
    data_error("ASCII PPM (P3) is not supported, use binary P6: " + path);
  if (data[1] != '6') data_error("not a PPM file: " + path);

  size_t pos = 2;
  const int64_t w = parse_int(data, pos, path);
  const int64_t h = parse_int(data, pos, path);
  const int64_t maxval = parse_int(data, pos, path);
  if (w < 1 || h < 1) data_error("empty PPM image: " + path);
  if (maxval > 255)
    data_error("16-bit PPM is not supported (maxval " +
               std::to_string(maxval) + "): " + path);
  if (maxval != 255)
    data_error("unsupported PPM maxval " + std::to_string(maxval) + ": " +
               path);
  if (pos >= data.size() || !(data[pos] == ' ' || data[pos] == '\t' ||
                              data[pos] == '\r' || data[pos] == '\n'))
    data_error("malformed PPM header in " + path);
  ++pos;  // exactly one separator byte before the raster

  const size_t need = static_cast<size_t>(w) * h * 3;
  if (data.size() - pos < need)
    data_error("truncated PPM pixel data in " + path);

  Tensor img = Tensor::zeros({1, 3, h, w});
  auto v = img.values();
  const unsigned char* raster =
      reinterpret_cast<const unsigned char*>(data.data() + pos);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        v[static_cast<size_t>((c * h + y) * w + x)] =
            static_cast<float>(raster[(y * w + x) * 3 + c]) / 255.0f;
  return img;
}

void write_image(const std::string& path, const Tensor& img) {
  if (!img.defined()) usage_error("write_image needs a defined tensor");
  int64_t h = 0, w = 0;
  if (img.rank() == 4 && img.dim(0) == 1 && img.dim(1) == 3) {
    h = img.dim(2);
    w = img.dim(3);
  } else if (img.rank() == 3 && img.dim(0) == 3) {
    h = img.dim(1);
    w = img.dim(2);
  } else {
    usage_error("write_image expects [1,3,H,W] or [3,H,W], got " +
                shape_str(img.shape()));
  }

  auto v = img.values();
  std::vector<unsigned char> raster(static_cast<size_t>(h) * w * 3);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        const float f = v[static_cast<size_t>((c * h + y) * w + x)];
        const float clamped = std::min(1.0f, std::max(0.0f, f));
        raster[(y * w + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(clamped * 255.0f));
      }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) data_error("cannot open " + path + " for writing");
  out << "P6\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(raster.data()),
            static_cast<std::streamsize>(raster.size()));
  out.flush();
  if (!out) data_error("failed writing image " + path);
}

}  // namespace snet
