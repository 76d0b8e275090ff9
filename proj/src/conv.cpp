#include <cmath>
#include <cstring>
#include <vector>

#include "snet/error.hpp"
#include "snet/tensor.hpp"

#if defined(__AVX512F__) && defined(__FMA__)
#include <immintrin.h>
#define SNET_SIMD_AVX512 1
#elif defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define SNET_SIMD_AVX2 1
#endif

// Stride-1 zero-padded cross-correlation via im2col and a register-blocked
// GEMM. All inner products accumulate in double with fma, reducing the patch
// axis (cin, kh, kw) in ascending order, so each output element is bitwise
// identical to a naive in-order loop over the receptive field. SIMD lanes
// hold independent output pixels; the per-element operation chain is the
// same on every code path.

namespace snet {

namespace {

// ---- SIMD abstraction: a vector of independent double accumulators -------

#if SNET_SIMD_AVX512
constexpr int64_t kLanes = 8;
using vd = __m512d;
inline vd vload(const double* p) { return _mm512_loadu_pd(p); }
inline vd vset1(double v) { return _mm512_set1_pd(v); }
inline vd vfma(vd a, vd b, vd c) { return _mm512_fmadd_pd(a, b, c); }
inline void vstore(double* p, vd v) { _mm512_storeu_pd(p, v); }
inline void vstoref(float* p, vd v) {
  _mm256_storeu_ps(p, _mm512_cvtpd_ps(v));
}
inline double vhsum(vd v) { return _mm512_reduce_add_pd(v); }
#elif SNET_SIMD_AVX2
constexpr int64_t kLanes = 4;
using vd = __m256d;
inline vd vload(const double* p) { return _mm256_loadu_pd(p); }
inline vd vset1(double v) { return _mm256_set1_pd(v); }
inline vd vfma(vd a, vd b, vd c) { return _mm256_fmadd_pd(a, b, c); }
inline void vstore(double* p, vd v) { _mm256_storeu_pd(p, v); }
inline void vstoref(float* p, vd v) {
  _mm_storeu_ps(p, _mm256_cvtpd_ps(v));
}
inline double vhsum(vd v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(lo) + _mm_cvtsd_f64(_mm_unpackhi_pd(lo, lo));
}
#else
constexpr int64_t kLanes = 1;
struct vd {
  double x;
};
inline vd vload(const double* p) { return {*p}; }
inline vd vset1(double v) { return {v}; }
inline vd vfma(vd a, vd b, vd c) { return {std::fma(a.x, b.x, c.x)}; }
inline void vstore(double* p, vd v) { *p = v.x; }
inline void vstoref(float* p, vd v) { *p = static_cast<float>(v.x); }
inline double vhsum(vd v) { return v.x; }
#endif

using Impl = std::shared_ptr<detail::TensorImpl>;

struct ConvDims {
  int64_t N, Cin, H, W;
  int64_t Cout, kh, kw;
  int64_t cin_g, cout_g, groups;
  int64_t oh, ow, m;     // output spatial dims, m = oh * ow
  int64_t kdim;          // cin_g * kh * kw
  int64_t dil;
  Pad2 pad;
};

ConvDims check_conv(const Tensor& input, const Tensor& weight,
                    const Tensor& bias, Pad2 pad, int64_t dilation,
                    int64_t groups) {
  if (input.rank() != 4)
    data_error("conv2d: input must be [N, C, H, W], shape is " +
               shape_str(input.shape()));
  if (weight.rank() != 4)
    data_error("conv2d: weight must be [Cout, Cin/groups, kh, kw], shape is " +
               shape_str(weight.shape()));
  if (dilation < 1) data_error("conv2d: dilation must be >= 1");
  if (groups < 1) data_error("conv2d: groups must be >= 1");
  if (pad.top < 0 || pad.bottom < 0 || pad.left < 0 || pad.right < 0)
    data_error("conv2d: negative padding");

  ConvDims d;
  d.N = input.dim(0);
  d.Cin = input.dim(1);
  d.H = input.dim(2);
  d.W = input.dim(3);
  d.Cout = weight.dim(0);
  d.kh = weight.dim(2);
  d.kw = weight.dim(3);
  d.groups = groups;
  d.dil = dilation;
  d.pad = pad;
  if (d.Cin % groups != 0 || d.Cout % groups != 0)
    data_error("conv2d: channel counts must divide groups");
  d.cin_g = d.Cin / groups;
  d.cout_g = d.Cout / groups;
  if (weight.dim(1) != d.cin_g)
    data_error("conv2d: weight expects " + std::to_string(weight.dim(1)) +
               " input channels per group, input provides " +
               std::to_string(d.cin_g));
  d.oh = d.H + pad.top + pad.bottom - dilation * (d.kh - 1);
  d.ow = d.W + pad.left + pad.right - dilation * (d.kw - 1);
  if (d.oh <= 0 || d.ow <= 0)
    data_error("conv2d: kernel does not fit the padded input");
  d.m = d.oh * d.ow;
  d.kdim = d.cin_g * d.kh * d.kw;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d.Cout))
    data_error("conv2d: bias must be [Cout]");
  return d;
}

// Gathers the receptive field of every output pixel of one (sample, group)
// into cols[kdim][m], zero for out-of-bounds taps, converted to double.
void im2col(const float* x, const ConvDims& d, int64_t group, double* cols) {
  const int64_t hw = d.H * d.W;
  for (int64_t ci = 0; ci < d.cin_g; ++ci) {
    const float* chan = x + (group * d.cin_g + ci) * hw;
    for (int64_t u = 0; u < d.kh; ++u)
      for (int64_t v = 0; v < d.kw; ++v) {
        double* row = cols + ((ci * d.kh + u) * d.kw + v) * d.m;
        for (int64_t oy = 0; oy < d.oh; ++oy) {
          const int64_t iy = oy - d.pad.top + u * d.dil;
          double* dst = row + oy * d.ow;
          if (iy < 0 || iy >= d.H) {
            std::memset(dst, 0, sizeof(double) * static_cast<size_t>(d.ow));
            continue;
          }
          const float* src = chan + iy * d.W;
          const int64_t shift = v * d.dil - d.pad.left;
          // ox range with in-bounds ix = ox + shift
          const int64_t lo = std::max<int64_t>(0, -shift);
          const int64_t hi = std::min(d.ow, d.W - shift);
          for (int64_t ox = 0; ox < std::min(lo, d.ow); ++ox) dst[ox] = 0.0;
          for (int64_t ox = lo; ox < hi; ++ox)
            dst[ox] = static_cast<double>(src[ox + shift]);
          for (int64_t ox = std::max(hi, int64_t{0}); ox < d.ow; ++ox)
            dst[ox] = 0.0;
        }
      }
  }
}

// out[r][c] = seed[r] + sum_k w[r][k] * cols[k][c], k ascending per element.
// Out is either float (forward output) or double (backward column buffer).
template <class OutT>
void gemm_rows(const double* w, const double* cols, const double* seed,
               int64_t rows, int64_t kdim, int64_t m, OutT* out) {
  constexpr int64_t RB = 4;
  constexpr int64_t CB = 2 * kLanes;
  const double zero = 0.0;
  for (int64_t r0 = 0; r0 < rows; r0 += RB) {
    const int64_t rmax = std::min(RB, rows - r0);
    int64_t c0 = 0;
    if (rmax == RB) {
      for (; c0 + CB <= m; c0 += CB) {
        vd acc00 = vset1(seed ? seed[r0 + 0] : zero), acc01 = acc00;
        vd acc10 = vset1(seed ? seed[r0 + 1] : zero), acc11 = acc10;
        vd acc20 = vset1(seed ? seed[r0 + 2] : zero), acc21 = acc20;
        vd acc30 = vset1(seed ? seed[r0 + 3] : zero), acc31 = acc30;
        const double* w0 = w + (r0 + 0) * kdim;
        const double* w1 = w + (r0 + 1) * kdim;
        const double* w2 = w + (r0 + 2) * kdim;
        const double* w3 = w + (r0 + 3) * kdim;
        const double* p = cols + c0;
        for (int64_t k = 0; k < kdim; ++k, p += m) {
          const vd p0 = vload(p);
          const vd p1 = vload(p + kLanes);
          const vd a0 = vset1(w0[k]);
          acc00 = vfma(a0, p0, acc00);
          acc01 = vfma(a0, p1, acc01);
          const vd a1 = vset1(w1[k]);
          acc10 = vfma(a1, p0, acc10);
          acc11 = vfma(a1, p1, acc11);
          const vd a2 = vset1(w2[k]);
          acc20 = vfma(a2, p0, acc20);
          acc21 = vfma(a2, p1, acc21);
          const vd a3 = vset1(w3[k]);
          acc30 = vfma(a3, p0, acc30);
          acc31 = vfma(a3, p1, acc31);
        }
        auto emit = [&](int64_t r, vd lo, vd hi) {
          OutT* dst = out + (r0 + r) * m + c0;
          if constexpr (std::is_same_v<OutT, float>) {
            vstoref(dst, lo);
            vstoref(dst + kLanes, hi);
          } else {
            vstore(dst, lo);
            vstore(dst + kLanes, hi);
          }
        };
        emit(0, acc00, acc01);
        emit(1, acc10, acc11);
        emit(2, acc20, acc21);
        emit(3, acc30, acc31);
      }
    }
    // Remainder columns and short row blocks: scalar chain, same order.
    for (int64_t r = 0; r < rmax; ++r) {
      const double* wr = w + (r0 + r) * kdim;
      for (int64_t c = c0; c < m; ++c) {
        double acc = seed ? seed[r0 + r] : 0.0;
        const double* p = cols + c;
        for (int64_t k = 0; k < kdim; ++k, p += m)
          acc = std::fma(wr[k], *p, acc);
        out[(r0 + r) * m + c] = static_cast<OutT>(acc);
      }
    }
  }
}

// dw[r][k] += sum_m a[r][m] * b[k][m] for row blocks of a against b.
void gemm_outer_acc(const double* a, const double* b, int64_t rows,
                    int64_t kdim, int64_t m, double* dw) {
  constexpr int64_t KB = 4;
  for (int64_t r = 0; r < rows; ++r) {
    const double* ar = a + r * m;
    int64_t k0 = 0;
    for (; k0 + KB <= kdim; k0 += KB) {
      vd acc0 = vset1(0.0), acc1 = acc0, acc2 = acc0, acc3 = acc0;
      const double* b0 = b + (k0 + 0) * m;
      const double* b1 = b + (k0 + 1) * m;
      const double* b2 = b + (k0 + 2) * m;
      const double* b3 = b + (k0 + 3) * m;
      int64_t c = 0;
      for (; c + kLanes <= m; c += kLanes) {
        const vd av = vload(ar + c);
        acc0 = vfma(av, vload(b0 + c), acc0);
        acc1 = vfma(av, vload(b1 + c), acc1);
        acc2 = vfma(av, vload(b2 + c), acc2);
        acc3 = vfma(av, vload(b3 + c), acc3);
      }
      double s0 = vhsum(acc0), s1 = vhsum(acc1), s2 = vhsum(acc2),
             s3 = vhsum(acc3);
      for (; c < m; ++c) {
        const double av = ar[c];
        s0 = std::fma(av, b0[c], s0);
        s1 = std::fma(av, b1[c], s1);
        s2 = std::fma(av, b2[c], s2);
        s3 = std::fma(av, b3[c], s3);
      }
      dw[r * kdim + k0 + 0] += s0;
      dw[r * kdim + k0 + 1] += s1;
      dw[r * kdim + k0 + 2] += s2;
      dw[r * kdim + k0 + 3] += s3;
    }
    for (; k0 < kdim; ++k0) {
      const double* bk = b + k0 * m;
      vd acc = vset1(0.0);
      int64_t c = 0;
      for (; c + kLanes <= m; c += kLanes)
        acc = vfma(vload(ar + c), vload(bk + c), acc);
      double s = vhsum(acc);
      for (; c < m; ++c) s = std::fma(ar[c], bk[c], s);
      dw[r * kdim + k0] += s;
    }
  }
}

// Scatters column-space gradients back onto one group's input planes.
void col2im_add(const double* colg, const ConvDims& d, double* xg) {
  for (int64_t ci = 0; ci < d.cin_g; ++ci)
    for (int64_t u = 0; u < d.kh; ++u)
      for (int64_t v = 0; v < d.kw; ++v) {
        const double* row = colg + ((ci * d.kh + u) * d.kw + v) * d.m;
        double* plane = xg + ci * d.H * d.W;
        for (int64_t oy = 0; oy < d.oh; ++oy) {
          const int64_t iy = oy - d.pad.top + u * d.dil;
          if (iy < 0 || iy >= d.H) continue;
          const double* src = row + oy * d.ow;
          double* dst = plane + iy * d.W;
          const int64_t shift = v * d.dil - d.pad.left;
          const int64_t lo = std::max<int64_t>(0, -shift);
          const int64_t hi = std::min(d.ow, d.W - shift);
          for (int64_t ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              Pad2 pad, int64_t dilation, int64_t groups) {
  const ConvDims d = check_conv(input, weight, bias, pad, dilation, groups);
  const bool rec =
      Tape::active() != nullptr &&
      (input.requires_grad() || weight.requires_grad() ||
       (bias.defined() && bias.requires_grad()));
  Tensor out = Tensor::zeros({d.N, d.Cout, d.oh, d.ow});
  out.set_requires_grad(rec);

  std::vector<double> cols(static_cast<size_t>(d.kdim * d.m));
  std::vector<double> wd(static_cast<size_t>(d.Cout * d.kdim));
  {
    auto wv = weight.values();
    for (size_t i = 0; i < wd.size(); ++i) wd[i] = static_cast<double>(wv[i]);
  }
  std::vector<double> bias_d(static_cast<size_t>(d.Cout), 0.0);
  if (bias.defined()) {
    auto bv = bias.values();
    for (int64_t i = 0; i < d.Cout; ++i) bias_d[static_cast<size_t>(i)] = bv[i];
  }

  auto iv = input.values();
  auto ov = out.values();
  for (int64_t n = 0; n < d.N; ++n) {
    const float* x = &iv[n * d.Cin * d.H * d.W];
    for (int64_t g = 0; g < d.groups; ++g) {
      im2col(x, d, g, cols.data());
      gemm_rows(wd.data() + g * d.cout_g * d.kdim, cols.data(),
                bias_d.data() + g * d.cout_g, d.cout_g, d.kdim, d.m,
                &ov[(n * d.Cout + g * d.cout_g) * d.m]);
    }
  }

  if (rec) {
    Impl ii = input.impl(), wi = weight.impl(), oi = out.impl();
    Impl bi = bias.defined() ? bias.impl() : nullptr;
    const bool need_i = input.requires_grad();
    const bool need_w = weight.requires_grad();
    const bool need_b = bias.defined() && bias.requires_grad();
    Tape::active()->record(out.impl(), [=]() {
      const auto& go = oi->grad_ref();
      std::vector<double> cols_b(
          need_w ? static_cast<size_t>(d.kdim * d.m) : 0);
      std::vector<double> gd(static_cast<size_t>(d.cout_g * d.m));
      std::vector<double> wt(
          need_i ? static_cast<size_t>(d.Cout * d.kdim) : 0);
      if (need_i)
        for (int64_t co = 0; co < d.Cout; ++co) {
          const int64_t g = co / d.cout_g;
          for (int64_t k = 0; k < d.kdim; ++k)
            wt[static_cast<size_t>((g * d.kdim + k) * d.cout_g +
                                   (co % d.cout_g))] =
                static_cast<double>(wi->values[static_cast<size_t>(
                    co * d.kdim + k)]);
        }
      std::vector<double> dw(
          need_w ? static_cast<size_t>(d.Cout * d.kdim) : 0, 0.0);
      std::vector<double> colg(
          need_i ? static_cast<size_t>(d.kdim * d.m) : 0);
      std::vector<double> xg(
          need_i ? static_cast<size_t>(d.cin_g * d.H * d.W) : 0);

      for (int64_t n = 0; n < d.N; ++n) {
        const float* x = &ii->values[static_cast<size_t>(n * d.Cin * d.H * d.W)];
        for (int64_t g = 0; g < d.groups; ++g) {
          const float* grow0 =
              &go[static_cast<size_t>((n * d.Cout + g * d.cout_g) * d.m)];
          for (int64_t i = 0; i < d.cout_g * d.m; ++i)
            gd[static_cast<size_t>(i)] = static_cast<double>(grow0[i]);
          if (need_i) {
            // colg[k][m] = sum_co wt[k][co] * gd[co][m]
            gemm_rows(wt.data() + g * d.kdim * d.cout_g, gd.data(), nullptr,
                      d.kdim, d.cout_g, d.m, colg.data());
            std::fill(xg.begin(), xg.end(), 0.0);
            col2im_add(colg.data(), d, xg.data());
            auto& gi = ii->grad_ref();
            float* gdst = &gi[static_cast<size_t>(
                (n * d.Cin + g * d.cin_g) * d.H * d.W)];
            for (size_t i = 0; i < xg.size(); ++i)
              gdst[i] += static_cast<float>(xg[i]);
          }
          if (need_w) {
            im2col(x, d, g, cols_b.data());
            gemm_outer_acc(gd.data(), cols_b.data(), d.cout_g, d.kdim, d.m,
                           dw.data() + g * d.cout_g * d.kdim);
          }
        }
      }
      if (need_w) {
        auto& gw = wi->grad_ref();
        for (size_t i = 0; i < dw.size(); ++i)
          gw[i] += static_cast<float>(dw[i]);
      }
      if (need_b) {
        auto& gb = bi->grad_ref();
        for (int64_t co = 0; co < d.Cout; ++co) {
          double acc = 0.0;
          for (int64_t n = 0; n < d.N; ++n) {
            const float* grow = &go[static_cast<size_t>((n * d.Cout + co) * d.m)];
            for (int64_t m = 0; m < d.m; ++m) acc += grow[m];
          }
          gb[static_cast<size_t>(co)] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

}  // namespace snet
