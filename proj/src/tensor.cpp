#include "snet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "snet/error.hpp"
#include "snet/rng.hpp"

namespace snet {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<float>& TensorImpl::grad_ref() {
  if (!grad) grad = std::make_unique<std::vector<float>>(values.size(), 0.0f);
  return *grad;
}

}  // namespace detail

namespace {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, float fill) {
  auto impl = std::make_shared<detail::TensorImpl>();
  const int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->values.assign(static_cast<size_t>(n), fill);
  return impl;
}

thread_local Tape* g_active_tape = nullptr;

bool track(const Tensor& t) {
  return t.defined() && t.requires_grad() && Tape::active() != nullptr;
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  for (int64_t d : shape)
    if (d <= 0) data_error("tensor dims must be positive, got " + shape_str(shape));
  auto impl = make_impl(std::move(shape), value);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_values(Shape shape, std::vector<float> values,
                           bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    data_error("value count " + std::to_string(values.size()) +
               " does not match shape " + shape_str(shape));
  for (int64_t d : shape)
    if (d <= 0) data_error("tensor dims must be positive, got " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!impl_) data_error("use of undefined tensor");
  return impl_->shape;
}

int64_t Tensor::dim(int64_t axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<int64_t>(s.size());
  if (axis < 0 || axis >= static_cast<int64_t>(s.size()))
    data_error("axis out of range for shape " + shape_str(s));
  return s[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const {
  if (!impl_) data_error("use of undefined tensor");
  return impl_->numel();
}

std::span<float> Tensor::values() & {
  if (!impl_) data_error("use of undefined tensor");
  return impl_->values;
}

std::span<const float> Tensor::values() const& {
  if (!impl_) data_error("use of undefined tensor");
  return impl_->values;
}

float Tensor::value() const {
  if (numel() != 1) data_error("value() requires a scalar tensor, shape is " +
                               shape_str(shape()));
  return impl_->values[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
  if (!impl_) data_error("use of undefined tensor");
  impl_->requires_grad = rg;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad != nullptr; }

std::span<const float> Tensor::grad_values() const& {
  if (!impl_) data_error("use of undefined tensor");
  return impl_->grad_ref();
}

Tensor Tensor::grad() const {
  if (!impl_) data_error("use of undefined tensor");
  auto& g = impl_->grad_ref();
  return Tensor::from_values(impl_->shape, std::vector<float>(g.begin(), g.end()));
}

void Tensor::zero_grad() {
  if (impl_ && impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0f);
}

Tensor Tensor::clone() const {
  if (!impl_) return Tensor();
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->values = impl_->values;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::detached() const {
  if (!impl_) return Tensor();
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->values = impl_->values;  // copy; detached views are cheap at our sizes
  impl->requires_grad = false;
  return Tensor(std::move(impl));
}

int64_t Tensor::index4(int64_t n, int64_t c, int64_t h, int64_t w) const {
  const auto& s = shape();
  if (s.size() != 4) data_error("index4 requires a rank-4 tensor, shape is " +
                                shape_str(s));
  return ((n * s[1] + c) * s[2] + h) * s[3] + w;
}

float Tensor::at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
  return impl_->values[static_cast<size_t>(index4(n, c, h, w))];
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<detail::TensorImpl> output,
                  std::function<void()> backward_fn) {
  nodes_.push_back(Node{std::move(output), std::move(backward_fn)});
}

void Tape::backward(const Tensor& root) {
  if (root.numel() != 1)
    data_error("backward requires a scalar root, shape is " +
               shape_str(root.shape()));
  for (auto& n : nodes_)
    if (auto* g = n.output->grad_if_allocated())
      std::fill(g->begin(), g->end(), 0.0f);
  root.impl()->grad_ref()[0] += 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
}

void backward(const Tensor& root) {
  Tape* t = Tape::active();
  if (!t) data_error("backward called with no active tape");
  t->backward(root);
}

// ---- op plumbing -----------------------------------------------------------

namespace {

using Impl = std::shared_ptr<detail::TensorImpl>;

Tensor make_like(const Shape& shape, bool grad_out) {
  Tensor out = Tensor::zeros(shape);
  out.set_requires_grad(grad_out);
  return out;
}

// Elementwise binary op. Either equal shapes or a scalar on one side.
template <class Fwd, class Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
                 Bwd bwd) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape())
    data_error(std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
               " vs " + shape_str(b.shape()));
  const Shape& out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
  const bool rec = track(a) || track(b);
  Tensor out = make_like(out_shape, rec);

  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    const float x = av[a_scalar ? 0 : i];
    const float y = bv[b_scalar ? 0 : i];
    ov[i] = fwd(x, y);
  }

  if (rec) {
    Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
    const bool need_a = a.requires_grad();
    const bool need_b = b.requires_grad();
    Tape::active()->record(out.impl(), [=]() {
      const auto& g = oi->grad_ref();
      const int64_t count = static_cast<int64_t>(g.size());
      double acc_a = 0.0, acc_b = 0.0;
      std::vector<float>* ga = need_a ? &ai->grad_ref() : nullptr;
      std::vector<float>* gb = need_b ? &bi->grad_ref() : nullptr;
      for (int64_t i = 0; i < count; ++i) {
        const float x = ai->values[a_scalar ? 0 : static_cast<size_t>(i)];
        const float y = bi->values[b_scalar ? 0 : static_cast<size_t>(i)];
        float da = 0.0f, db = 0.0f;
        bwd(x, y, g[static_cast<size_t>(i)], da, db);
        if (ga) {
          if (a_scalar)
            acc_a += da;
          else
            (*ga)[static_cast<size_t>(i)] += da;
        }
        if (gb) {
          if (b_scalar)
            acc_b += db;
          else
            (*gb)[static_cast<size_t>(i)] += db;
        }
      }
      if (ga && a_scalar) (*ga)[0] += static_cast<float>(acc_a);
      if (gb && b_scalar) (*gb)[0] += static_cast<float>(acc_b);
    });
  }
  return out;
}

// Elementwise unary op; backward derives the local gradient from the input
// value in double precision.
template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
  const bool rec = track(a);
  Tensor out = make_like(a.shape(), rec);
  auto av = a.values();
  auto ov = out.values();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = fwd(av[i]);
  if (rec) {
    Impl ai = a.impl(), oi = out.impl();
    Tape::active()->record(out.impl(), [=]() {
      const auto& g = oi->grad_ref();
      auto& ga = ai->grad_ref();
      for (size_t i = 0; i < g.size(); ++i)
        ga[i] += static_cast<float>(bwd(static_cast<double>(ai->values[i])) *
                                    static_cast<double>(g[i]));
    });
  }
  return out;
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "add", [](float x, float y) { return x + y; },
                   [](float, float, float g, float& da, float& db) {
                     da = g;
                     db = g;
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "sub", [](float x, float y) { return x - y; },
                   [](float, float, float g, float& da, float& db) {
                     da = g;
                     db = -g;
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "mul", [](float x, float y) { return x * y; },
                   [](float x, float y, float g, float& da, float& db) {
                     da = g * y;
                     db = g * x;
                   });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "div", [](float x, float y) { return x / y; },
                   [](float x, float y, float g, float& da, float& db) {
                     da = g / y;
                     db = -g * x / (y * y);
                   });
}

Tensor add(const Tensor& a, float s) { return add(a, Tensor::scalar(s)); }
Tensor sub(const Tensor& a, float s) { return sub(a, Tensor::scalar(s)); }
Tensor sub(float s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
Tensor mul(const Tensor& a, float s) { return mul(a, Tensor::scalar(s)); }
Tensor div(const Tensor& a, float s) { return div(a, Tensor::scalar(s)); }
Tensor div(float s, const Tensor& a) { return div(Tensor::scalar(s), a); }

Tensor log(const Tensor& a) {
  for (float v : a.values())
    if (!(v > 0.0f)) numeric_error("log requires positive values, got " +
                                   std::to_string(v));
  return unary_op(a, [](float x) { return std::log(x); },
                  [](double x) { return 1.0 / x; });
}

Tensor log1p(const Tensor& a) {
  for (float v : a.values())
    if (!(v > -1.0f)) numeric_error("log1p requires values > -1, got " +
                                    std::to_string(v));
  return unary_op(a, [](float x) { return std::log1p(x); },
                  [](double x) { return 1.0 / (1.0 + x); });
}

Tensor exp(const Tensor& a) {
  return unary_op(a, [](float x) { return std::exp(x); },
                  [](double x) { return std::exp(x); });
}

Tensor sqrt(const Tensor& a) {
  for (float v : a.values())
    if (v < 0.0f) numeric_error("sqrt requires non-negative values, got " +
                                std::to_string(v));
  return unary_op(a, [](float x) { return std::sqrt(x); },
                  [](double x) { return x > 0.0 ? 0.5 / std::sqrt(x) : 0.0; });
}

Tensor pow(const Tensor& a, float p) {
  for (float v : a.values())
    if (v < 0.0f) numeric_error("pow requires a non-negative base, got " +
                                std::to_string(v));
  const double pd = p;
  return unary_op(a, [p](float x) { return std::pow(x, p); },
                  [pd](double x) {
                    if (x == 0.0) return pd == 1.0 ? 1.0 : 0.0;
                    return pd * std::pow(x, pd - 1.0);
                  });
}

Tensor abs(const Tensor& a) {
  return unary_op(a, [](float x) { return std::fabs(x); },
                  [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, [](float x) { return x > 0.0f ? x : 0.0f; },
                  [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a,
                  [](float x) {
                    return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(x))));
                  },
                  [](double x) {
                    const double s = 1.0 / (1.0 + std::exp(-x));
                    return s * (1.0 - s);
                  });
}

Tensor clamp01(const Tensor& a) {
  if (track(a))
    throw std::logic_error(
        "clamp01 is not differentiable and cannot be recorded on a tape");
  Tensor out = make_like(a.shape(), false);
  auto av = a.values();
  auto ov = out.values();
  for (int64_t i = 0; i < a.numel(); ++i)
    ov[i] = std::min(1.0f, std::max(0.0f, av[i]));
  return out;
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  const bool rec = track(a);
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  out.set_requires_grad(rec);
  if (rec) {
    Impl ai = a.impl(), oi = out.impl();
    Tape::active()->record(out.impl(), [=]() {
      const float g = oi->grad_ref()[0];
      auto& ga = ai->grad_ref();
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  const int64_t n = a.numel();
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  const bool rec = track(a);
  Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
  out.set_requires_grad(rec);
  if (rec) {
    Impl ai = a.impl(), oi = out.impl();
    Tape::active()->record(out.impl(), [=]() {
      const float g =
          static_cast<float>(static_cast<double>(oi->grad_ref()[0]) / n);
      auto& ga = ai->grad_ref();
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

// ---- structural ------------------------------------------------------------

Tensor cumsum_last(const Tensor& a) {
  const int64_t last = a.dim(-1);
  const int64_t rows = a.numel() / last;
  const bool rec = track(a);
  Tensor out = make_like(a.shape(), rec);
  auto av = a.values();
  auto ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t i = 0; i < last; ++i) {
      acc += av[r * last + i];
      ov[r * last + i] = static_cast<float>(acc);
    }
  }
  if (rec) {
    Impl ai = a.impl(), oi = out.impl();
    Tape::active()->record(out.impl(), [=]() {
      const auto& g = oi->grad_ref();
      auto& ga = ai->grad_ref();
      for (int64_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (int64_t i = last - 1; i >= 0; --i) {
          acc += g[static_cast<size_t>(r * last + i)];
          ga[static_cast<size_t>(r * last + i)] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor flip_last(const Tensor& a) {
  const int64_t last = a.dim(-1);
  const int64_t rows = a.numel() / last;
  const bool rec = track(a);
  Tensor out = make_like(a.shape(), rec);
  auto av = a.values();
  auto ov = out.values();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t i = 0; i < last; ++i)
      ov[r * last + i] = av[r * last + (last - 1 - i)];
  if (rec) {
    Impl ai = a.impl(), oi = out.impl();
    Tape::active()->record(out.impl(), [=]() {
      const auto& g = oi->grad_ref();
      auto& ga = ai->grad_ref();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < last; ++i)
          ga[static_cast<size_t>(r * last + (last - 1 - i))] +=
              g[static_cast<size_t>(r * last + i)];
    });
  }
  return out;
}

namespace {

// start offset (in elements) of each part along `axis`, plus strides.
struct AxisLayout {
  int64_t outer = 1;   // product of dims before axis
  int64_t axis_len = 0;
  int64_t inner = 1;   // product of dims after axis
};

AxisLayout axis_layout(const Shape& s, int64_t axis) {
  AxisLayout l;
  for (int64_t i = 0; i < axis; ++i) l.outer *= s[static_cast<size_t>(i)];
  l.axis_len = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i)
    l.inner *= s[i];
  return l;
}

int64_t normalize_axis(int64_t axis, size_t rank, const char* name) {
  if (axis < 0) axis += static_cast<int64_t>(rank);
  if (axis < 0 || axis >= static_cast<int64_t>(rank))
    data_error(std::string(name) + ": axis out of range");
  return axis;
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
  if (parts.empty()) data_error("concat: needs at least one tensor");
  const Shape& first = parts[0].shape();
  const int64_t ax = normalize_axis(axis, first.size(), "concat");
  int64_t total = 0;
  bool rec = false;
  for (const Tensor& p : parts) {
    if (p.rank() != static_cast<int64_t>(first.size()))
      data_error("concat: rank mismatch");
    for (size_t d = 0; d < first.size(); ++d)
      if (static_cast<int64_t>(d) != ax && p.shape()[d] != first[d])
        data_error("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                   shape_str(first));
    total += p.shape()[static_cast<size_t>(ax)];
    rec = rec || track(p);
  }
  Shape out_shape = first;
  out_shape[static_cast<size_t>(ax)] = total;
  Tensor out = make_like(out_shape, rec);
  const AxisLayout ol = axis_layout(out_shape, ax);
  auto ov = out.values();

  int64_t offset = 0;
  for (const Tensor& p : parts) {
    const AxisLayout pl = axis_layout(p.shape(), ax);
    auto pv = p.values();
    for (int64_t o = 0; o < pl.outer; ++o)
      for (int64_t i = 0; i < pl.axis_len; ++i)
        std::copy_n(&pv[(o * pl.axis_len + i) * pl.inner], pl.inner,
                    &ov[(o * ol.axis_len + offset + i) * ol.inner]);
    offset += pl.axis_len;
  }

  if (rec) {
    std::vector<Impl> impls;
    impls.reserve(parts.size());
    for (const Tensor& p : parts) impls.push_back(p.impl());
    std::vector<bool> need(parts.size());
    for (size_t i = 0; i < parts.size(); ++i) need[i] = parts[i].requires_grad();
    Impl oi = out.impl();
    Tape::active()->record(out.impl(), [=]() {
      const auto& g = oi->grad_ref();
      int64_t off = 0;
      for (size_t pi = 0; pi < impls.size(); ++pi) {
        const AxisLayout pl = axis_layout(impls[pi]->shape, ax);
        if (need[pi]) {
          auto& ga = impls[pi]->grad_ref();
          for (int64_t o = 0; o < pl.outer; ++o)
            for (int64_t i = 0; i < pl.axis_len; ++i) {
              const float* src = &g[static_cast<size_t>(
                  (o * ol.axis_len + off + i) * ol.inner)];
              float* dst =
                  &ga[static_cast<size_t>((o * pl.axis_len + i) * pl.inner)];
              for (int64_t k = 0; k < pl.inner; ++k) dst[k] += src[k];
            }
        }
        off += pl.axis_len;
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t stop) {
  const int64_t ax = normalize_axis(axis, a.shape().size(), "slice");
  const int64_t len = a.shape()[static_cast<size_t>(ax)];
  if (start < 0 || stop > len || start >= stop)
    data_error("slice: invalid range [" + std::to_string(start) + ", " +
               std::to_string(stop) + ") for axis of length " +
               std::to_string(len));
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(ax)] = stop - start;
  const bool rec = track(a);
  Tensor out = make_like(out_shape, rec);
  const AxisLayout al = axis_layout(a.shape(), ax);
  const AxisLayout ol = axis_layout(out_shape, ax);
  auto av = a.values();
  auto ov = out.values();
  for (int64_t o = 0; o < al.outer; ++o)
    for (int64_t i = 0; i < ol.axis_len; ++i)
      std::copy_n(&av[(o * al.axis_len + start + i) * al.inner], al.inner,
                  &ov[(o * ol.axis_len + i) * ol.inner]);
  if (rec) {
    Impl ai = a.impl(), oi = out.impl();
    Tape::active()->record(out.impl(), [=]() {
      const auto& g = oi->grad_ref();
      auto& ga = ai->grad_ref();
      for (int64_t o = 0; o < al.outer; ++o)
        for (int64_t i = 0; i < ol.axis_len; ++i) {
          const float* src =
              &g[static_cast<size_t>((o * ol.axis_len + i) * ol.inner)];
          float* dst = &ga[static_cast<size_t>(
              (o * al.axis_len + start + i) * al.inner)];
          for (int64_t k = 0; k < al.inner; ++k) dst[k] += src[k];
        }
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& a) {
  if (a.rank() != 4)
    data_error("global_avg_pool expects [N, C, H, W], shape is " +
               shape_str(a.shape()));
  const int64_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const int64_t hw = H * W;
  const bool rec = track(a);
  Tensor out = make_like({N, C}, rec);
  auto av = a.values();
  auto ov = out.values();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    double acc = 0.0;
    const float* src = &av[nc * hw];
    for (int64_t i = 0; i < hw; ++i) acc += src[i];
    ov[nc] = static_cast<float>(acc / static_cast<double>(hw));
  }
  if (rec) {
    Impl ai = a.impl(), oi = out.impl();
    Tape::active()->record(out.impl(), [=]() {
      const auto& g = oi->grad_ref();
      auto& ga = ai->grad_ref();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const float gv = static_cast<float>(
            static_cast<double>(g[static_cast<size_t>(nc)]) / hw);
        float* dst = &ga[static_cast<size_t>(nc * hw)];
        for (int64_t i = 0; i < hw; ++i) dst[i] += gv;
      }
    });
  }
  return out;
}

Tensor scale_channels(const Tensor& feat, const Tensor& gate) {
  if (feat.rank() != 4 || gate.rank() != 2 || feat.dim(0) != gate.dim(0) ||
      feat.dim(1) != gate.dim(1))
    data_error("scale_channels expects feat [N, C, H, W] and gate [N, C], got " +
               shape_str(feat.shape()) + " and " + shape_str(gate.shape()));
  const int64_t N = feat.dim(0), C = feat.dim(1), hw = feat.dim(2) * feat.dim(3);
  const bool rec = track(feat) || track(gate);
  Tensor out = make_like(feat.shape(), rec);
  auto fv = feat.values();
  auto gv = gate.values();
  auto ov = out.values();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float s = gv[nc];
    const float* src = &fv[nc * hw];
    float* dst = &ov[nc * hw];
    for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] * s;
  }
  if (rec) {
    Impl fi = feat.impl(), gi = gate.impl(), oi = out.impl();
    const bool need_f = feat.requires_grad();
    const bool need_g = gate.requires_grad();
    Tape::active()->record(out.impl(), [=]() {
      const auto& g = oi->grad_ref();
      if (need_f) {
        auto& gf = fi->grad_ref();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          const float s = gi->values[static_cast<size_t>(nc)];
          const float* src = &g[static_cast<size_t>(nc * hw)];
          float* dst = &gf[static_cast<size_t>(nc * hw)];
          for (int64_t i = 0; i < hw; ++i) dst[i] += src[i] * s;
        }
      }
      if (need_g) {
        auto& gg = gi->grad_ref();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          double acc = 0.0;
          const float* go = &g[static_cast<size_t>(nc * hw)];
          const float* fvv = &fi->values[static_cast<size_t>(nc * hw)];
          for (int64_t i = 0; i < hw; ++i)
            acc += static_cast<double>(go[i]) * static_cast<double>(fvv[i]);
          gg[static_cast<size_t>(nc)] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor conv1d_last(const Tensor& input, const Tensor& weight, int64_t pad) {
  if (weight.rank() != 1) data_error("conv1d_last expects a rank-1 kernel");
  const int64_t k = weight.dim(0);
  if (k % 2 == 0) data_error("conv1d_last expects an odd kernel length");
  const int64_t L = input.dim(-1);
  const int64_t out_len = L + 2 * pad - (k - 1);
  if (out_len <= 0) data_error("conv1d_last: kernel longer than padded input");
  const int64_t rows = input.numel() / L;
  Shape out_shape = input.shape();
  out_shape.back() = out_len;
  const bool rec = track(input) || track(weight);
  Tensor out = make_like(out_shape, rec);
  auto iv = input.values();
  auto wv = weight.values();
  auto ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    const float* src = &iv[r * L];
    float* dst = &ov[r * out_len];
    for (int64_t o = 0; o < out_len; ++o) {
      double acc = 0.0;
      for (int64_t t = 0; t < k; ++t) {
        const int64_t pos = o + t - pad;
        if (pos >= 0 && pos < L) acc += static_cast<double>(src[pos]) * wv[t];
      }
      dst[o] = static_cast<float>(acc);
    }
  }
  if (rec) {
    Impl ii = input.impl(), wi = weight.impl(), oi = out.impl();
    const bool need_i = input.requires_grad();
    const bool need_w = weight.requires_grad();
    Tape::active()->record(out.impl(), [=]() {
      const auto& g = oi->grad_ref();
      if (need_i) {
        auto& gi = ii->grad_ref();
        for (int64_t r = 0; r < rows; ++r) {
          const float* go = &g[static_cast<size_t>(r * out_len)];
          float* dst = &gi[static_cast<size_t>(r * L)];
          for (int64_t o = 0; o < out_len; ++o)
            for (int64_t t = 0; t < k; ++t) {
              const int64_t pos = o + t - pad;
              if (pos >= 0 && pos < L)
                dst[pos] += go[o] * wi->values[static_cast<size_t>(t)];
            }
        }
      }
      if (need_w) {
        auto& gw = wi->grad_ref();
        for (int64_t t = 0; t < k; ++t) {
          double acc = 0.0;
          for (int64_t r = 0; r < rows; ++r) {
            const float* go = &g[static_cast<size_t>(r * out_len)];
            const float* src = &ii->values[static_cast<size_t>(r * L)];
            for (int64_t o = 0; o < out_len; ++o) {
              const int64_t pos = o + t - pad;
              if (pos >= 0 && pos < L)
                acc += static_cast<double>(go[o]) * static_cast<double>(src[pos]);
            }
          }
          gw[static_cast<size_t>(t)] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

// ---- gradient checking -----------------------------------------------------

GradCheckReport gradient_check(const std::function<Tensor()>& f,
                               const std::vector<Tensor>& leaves, double eps,
                               double tol, int64_t max_coords, uint64_t seed) {
  GradCheckReport report;
  for (const Tensor& leaf : leaves) {
    if (!leaf.requires_grad())
      data_error("gradient_check: every leaf must require gradients");
    if (auto* g = leaf.impl()->grad_if_allocated())
      std::fill(g->begin(), g->end(), 0.0f);
  }
  std::vector<std::vector<float>> analytic(leaves.size());
  {
    Tape tape;
    Tensor y = f();
    if (y.numel() != 1) data_error("gradient_check: f must return a scalar");
    tape.backward(y);
    for (size_t li = 0; li < leaves.size(); ++li) {
      auto g = leaves[li].grad_values();
      analytic[li].assign(g.begin(), g.end());
      leaves[li].impl()->grad->assign(g.size(), 0.0f);
    }
  }

  Rng rng(seed);
  for (size_t li = 0; li < leaves.size(); ++li) {
    const Tensor& leaf = leaves[li];
    const int64_t n = leaf.numel();
    std::vector<int64_t> coords;
    if (max_coords <= 0 || max_coords >= n) {
      coords.resize(static_cast<size_t>(n));
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      for (int64_t i = 0; i < max_coords; ++i)
        coords.push_back(static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(n))));
    }
    auto vals = leaf.impl()->values.data();
    for (int64_t ci : coords) {
      const float saved = vals[ci];
      const double x0 = static_cast<double>(saved);
      // The perturbed points round to float; measure the step actually taken.
      vals[ci] = static_cast<float>(x0 + eps);
      const double hp = static_cast<double>(vals[ci]) - x0;
      const double yp = f().value();
      vals[ci] = static_cast<float>(x0 - eps);
      const double hm = x0 - static_cast<double>(vals[ci]);
      const double ym = f().value();
      vals[ci] = saved;
      const double numeric = (yp - ym) / (hp + hm);
      const double a = analytic[li][static_cast<size_t>(ci)];
      if (!std::isfinite(numeric) || !std::isfinite(a)) report.finite = false;
      double rel = 0.0;
      const double denom = std::max(std::fabs(a), std::fabs(numeric));
      if (denom >= 1e-12) rel = std::fabs(a - numeric) / denom;
      report.max_rel_err = std::max(report.max_rel_err, rel);
      ++report.coords_checked;
    }
  }
  report.pass = report.finite && report.max_rel_err <= tol;
  return report;
}

GradCheckReport gradient_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double eps, double tol,
                               int64_t max_coords, uint64_t seed) {
  return gradient_check([&]() { return f(x); }, {x}, eps, tol, max_coords,
                        seed);
}

}  // namespace snet
