#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace snet {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> values;
  std::unique_ptr<std::vector<float>> grad;  // lazily allocated, zero-filled
  bool requires_grad = false;

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  std::vector<float>& grad_ref();            // allocates on first use
  std::vector<float>* grad_if_allocated() { return grad.get(); }
};

}  // namespace detail

// Dense float32 tensor with shared-value semantics: copies alias the same
// storage. Image-like data is laid out [N, C, H, W] row-major. Reductions
// and convolution inner products accumulate in double.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<float> values,
                            bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t rank() const { return static_cast<int64_t>(shape().size()); }
  int64_t dim(int64_t axis) const;
  int64_t numel() const;

  // Spans alias the tensor's storage, so they are only offered on lvalues;
  // bind a temporary to a named Tensor first.
  std::span<float> values() &;
  std::span<const float> values() const&;
  std::span<float> values() && = delete;
  std::span<const float> values() const&& = delete;
  float value() const;  // scalar tensors only

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  bool has_grad() const;
  std::span<const float> grad_values() const&;  // zeros if never touched
  std::span<const float> grad_values() const&& = delete;
  Tensor grad() const;                         // grad as a fresh tensor
  void zero_grad();

  Tensor clone() const;                        // deep copy, grad not copied
  Tensor detached() const;                     // shares values, no grad flag

  // Flat index helpers for 4-D image tensors.
  int64_t index4(int64_t n, int64_t c, int64_t h, int64_t w) const;
  float at4(int64_t n, int64_t c, int64_t h, int64_t w) const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Records the differentiable ops executed while it is alive. Constructing a
// tape makes it the active one for the current thread; destruction restores
// the previous tape. One tape serves one logical execution stream.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::shared_ptr<detail::TensorImpl> output,
              std::function<void()> backward_fn);
  size_t node_count() const { return nodes_.size(); }

  // Zeroes the gradients of every tensor this tape produced, seeds
  // grad(root) = 1, and replays all recorded nodes in reverse order. root
  // must be scalar. Leaf gradients accumulate additively across calls.
  void backward(const Tensor& root);

 private:
  struct Node {
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
};

// Convenience: backward on the active tape.
void backward(const Tensor& root);

// ---- elementwise -----------------------------------------------------------
// Binary ops require equal shapes or a scalar (numel == 1) on either side.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, float s);
Tensor sub(const Tensor& a, float s);
Tensor sub(float s, const Tensor& a);
Tensor mul(const Tensor& a, float s);
Tensor div(const Tensor& a, float s);
Tensor div(float s, const Tensor& a);

Tensor log(const Tensor& a);    // requires values > 0
Tensor log1p(const Tensor& a);  // requires values > -1
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);   // requires values >= 0
Tensor pow(const Tensor& a, float p);  // requires values >= 0
Tensor abs(const Tensor& a);    // subgradient 0 at 0
Tensor relu(const Tensor& a);   // subgradient 0 at 0
Tensor sigmoid(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, float s) { return add(a, s); }
inline Tensor operator-(const Tensor& a, float s) { return sub(a, s); }
inline Tensor operator*(const Tensor& a, float s) { return mul(a, s); }
inline Tensor operator/(const Tensor& a, float s) { return div(a, s); }
inline Tensor operator*(float s, const Tensor& a) { return mul(a, s); }
inline Tensor operator-(float s, const Tensor& a) { return sub(s, a); }

// Clamp to [0, 1]. Not differentiable; rejects recording onto a tape.
Tensor clamp01(const Tensor& a);

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a);   // scalar, double accumulation
Tensor mean(const Tensor& a);  // scalar, double accumulation

// ---- structural ------------------------------------------------------------

Tensor cumsum_last(const Tensor& a);
Tensor flip_last(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, int64_t axis);
Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t stop);
Tensor global_avg_pool(const Tensor& a);           // [N,C,H,W] -> [N,C]
Tensor scale_channels(const Tensor& feat, const Tensor& gate);  // gate [N,C]

// ---- convolution -----------------------------------------------------------

struct Pad2 {
  int64_t top = 0, bottom = 0, left = 0, right = 0;
};

// Zero-padded cross-correlation at stride 1.
// input [N, Cin, H, W], weight [Cout, Cin/groups, kh, kw], optional bias
// [Cout]. Output [N, Cout, H + top + bottom - dilation*(kh-1), ...].
Tensor conv2d(const Tensor& input, const Tensor& weight,
              const Tensor& bias = Tensor(), Pad2 pad = Pad2{},
              int64_t dilation = 1, int64_t groups = 1);

// 1-D zero-padded cross-correlation along the last axis with an odd-length
// kernel; pad taps of zero on both sides.
Tensor conv1d_last(const Tensor& input, const Tensor& weight, int64_t pad);

// ---- gradient checking -----------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  bool finite = true;
  int64_t coords_checked = 0;
};

// Central finite differences against the tape gradient of scalar-valued f.
// Relative error uses max(|analytic|, |numeric|) as denominator; pairs that
// are both below 1e-12 in magnitude count as exact agreement. max_coords = 0
// checks every coordinate; otherwise that many are sampled per leaf.
GradCheckReport gradient_check(const std::function<Tensor()>& f,
                               const std::vector<Tensor>& leaves, double eps,
                               double tol, int64_t max_coords = 0,
                               uint64_t seed = 7);

GradCheckReport gradient_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double eps, double tol,
                               int64_t max_coords = 0, uint64_t seed = 7);

}  // namespace snet
