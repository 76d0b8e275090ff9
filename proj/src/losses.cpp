#include <cmath>
#include <string>
#include <vector>

#include "snet/error.hpp"
#include "snet/losses.hpp"

namespace snet {

namespace {

constexpr int64_t kWin = 11;
constexpr double kSigmaW = 1.5;
constexpr float kC1 = 1e-4f;  // (0.01)^2, unit dynamic range
constexpr float kC2 = 9e-4f;  // (0.03)^2
constexpr float kD1 = 1e-6f;  // texture-term stabilizer
constexpr float kD2 = 1e-6f;  // structure-term stabilizer

void check_pair(const Tensor& x, const Tensor& y, const char* op) {
  if (!x.defined() || !y.defined() || x.rank() != 4)
    data_error(std::string(op) + ": inputs must be [N, C, H, W] tensors");
  if (x.shape() != y.shape())
    data_error(std::string(op) + ": shape mismatch " + shape_str(x.shape()) +
               " vs " + shape_str(y.shape()));
}

// Depthwise [C,1,len,len] constant filter from the outer product of a
// normalized 1-D profile.
Tensor depthwise_window(const std::vector<double>& g, int64_t channels) {
  const int64_t len = static_cast<int64_t>(g.size());
  std::vector<float> w(static_cast<size_t>(channels * len * len));
  for (int64_t i = 0; i < len; ++i)
    for (int64_t j = 0; j < len; ++j) {
      const float v = static_cast<float>(g[static_cast<size_t>(i)] *
                                         g[static_cast<size_t>(j)]);
      for (int64_t c = 0; c < channels; ++c)
        w[static_cast<size_t>((c * len + i) * len + j)] = v;
    }
  return Tensor::from_values({channels, 1, len, len}, std::move(w));
}

std::vector<double> gaussian_profile(int64_t len, double sigma) {
  std::vector<double> g(static_cast<size_t>(len));
  const int64_t c = (len - 1) / 2;
  double total = 0.0;
  for (int64_t i = 0; i < len; ++i) {
    const double d = static_cast<double>(i - c);
    g[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += g[static_cast<size_t>(i)];
  }
  for (auto& v : g) v /= total;
  return g;
}

}  // namespace

std::vector<Tensor> PyramidExtractor::extract(const Tensor& img) const {
  if (!img.defined() || img.rank() != 4)
    data_error("feature extractor: input must be [N, C, H, W]");
  const int64_t C = img.dim(1);
  // Binomial 5-tap profile [1,4,6,4,1]/16.
  static const std::vector<double> prof = {1.0 / 16, 4.0 / 16, 6.0 / 16,
                                           4.0 / 16, 1.0 / 16};
  Tensor w = depthwise_window(prof, C);
  Tensor l1 = conv2d(img, w, Tensor(), Pad2{2, 2, 2, 2}, 1, C);
  Tensor l2 = conv2d(l1, w, Tensor(), Pad2{2, 2, 2, 2}, 1, C);
  return {img, l1, l2};
}

Tensor ssim_loss(const Tensor& x, const Tensor& y) {
  check_pair(x, y, "ssim_loss");
  if (x.dim(2) < kWin || x.dim(3) < kWin)
    data_error("ssim_loss: image must be at least 11x11");
  const int64_t C = x.dim(1);
  Tensor w = depthwise_window(gaussian_profile(kWin, kSigmaW), C);
  auto blur = [&](const Tensor& t) {
    return conv2d(t, w, Tensor(), Pad2{}, 1, C);
  };
  Tensor mx = blur(x);
  Tensor my = blur(y);
  Tensor mx2 = mul(mx, mx);
  Tensor my2 = mul(my, my);
  Tensor mxy = mul(mx, my);
  Tensor vx = sub(blur(mul(x, x)), mx2);
  Tensor vy = sub(blur(mul(y, y)), my2);
  Tensor cxy = sub(blur(mul(x, y)), mxy);
  Tensor num = mul(add(mul(mxy, 2.0f), kC1), add(mul(cxy, 2.0f), kC2));
  Tensor den = mul(add(add(mx2, my2), kC1), add(add(vx, vy), kC2));
  return sub(1.0f, mean(div(num, den)));
}

Tensor charbonnier_loss(const Tensor& x, const Tensor& y) {
  if (!x.defined() || !y.defined() || x.shape() != y.shape())
    data_error("charbonnier_loss: shapes must match");
  const float eps = 1e-3f;
  Tensor d = sub(x, y);
  return mean(sqrt(add(mul(d, d), eps * eps)));
}

Tensor dists_loss(const Tensor& x, const Tensor& y,
                  const FeatureExtractor& f) {
  check_pair(x, y, "dists_loss");
  std::vector<Tensor> fx = f.extract(x);
  std::vector<Tensor> fy = f.extract(y);
  if (fx.empty() || fx.size() != fy.size())
    data_error("dists_loss: extractor must yield matching, nonempty maps");
  const float wgt = 1.0f / (2.0f * static_cast<float>(fx.size()));
  Tensor acc;
  for (size_t m = 0; m < fx.size(); ++m) {
    Tensor mx = global_avg_pool(fx[m]);
    Tensor my = global_avg_pool(fy[m]);
    Tensor mx2 = mul(mx, mx);
    Tensor my2 = mul(my, my);
    Tensor mxy = mul(mx, my);
    Tensor vx = sub(global_avg_pool(mul(fx[m], fx[m])), mx2);
    Tensor vy = sub(global_avg_pool(mul(fy[m], fy[m])), my2);
    Tensor cxy = sub(global_avg_pool(mul(fx[m], fy[m])), mxy);
    Tensor texture = div(add(mul(mxy, 2.0f), kD1), add(add(mx2, my2), kD1));
    Tensor structure = div(add(mul(cxy, 2.0f), kD2), add(add(vx, vy), kD2));
    Tensor term =
        add(mul(mean(texture), wgt), mul(mean(structure), wgt));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return sub(1.0f, acc);
}

LossTerms total_loss(const Tensor& o, const Tensor& n, const Tensor& ol,
                     const Tensor& cl, const FeatureExtractor& f,
                     bool use_les) {
  LossTerms t;
  Tensor s = ssim_loss(o, n);
  Tensor c = charbonnier_loss(o, n);
  Tensor d = dists_loss(o, n, f);
  t.l_ssim = s.value();
  t.l_char = c.value();
  t.l_dists = d.value();
  t.l_h = t.l_ssim + t.l_char + t.l_dists;
  Tensor lh = add(add(s, c), d);
  if (use_les) {
    Tensor s2 = ssim_loss(ol, cl);
    Tensor c2 = charbonnier_loss(ol, cl);
    Tensor d2 = dists_loss(ol, cl, f);
    t.l_l = static_cast<double>(s2.value()) + c2.value() + d2.value();
    t.total = add(lh, add(add(s2, c2), d2));
  } else {
    t.l_l = 0.0;
    t.total = lh;
  }
  t.l_t = t.l_h + t.l_l;
  return t;
}

double psnr(const Tensor& x, const Tensor& y, double peak) {
  if (!x.defined() || !y.defined() || x.shape() != y.shape())
    data_error("psnr: shapes must match");
  auto xv = x.values();
  auto yv = y.values();
  double mse = 0.0;
  for (size_t i = 0; i < xv.size(); ++i) {
    const double d = static_cast<double>(xv[i]) - static_cast<double>(yv[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(xv.size());
  if (mse < 1e-10) return 100.0;
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim_index(const Tensor& x, const Tensor& y) {
  return 1.0 - static_cast<double>(ssim_loss(x, y).value());
}

}  // namespace snet
