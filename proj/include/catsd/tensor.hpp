#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace catsd {

// Dense N-d array of doubles, row-major, with reverse-mode differentiation
// through an explicit GradTape. Tensors are immutable after construction
// except for gradient accumulation. Everything is double precision; the
// finite-difference checks this project leans on need the headroom.
//
// Ops that could turn finite inputs into NaN/Inf validate their inputs (log,
// sqrt-like norms) or are written in stable form (softmax family), so finite
// in -> finite out holds throughout.

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // sized lazily by backward
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  std::size_t size() const;

  std::span<const double> data() const;
  // Mutable view of the payload. Only meant for filling a freshly constructed
  // leaf; mutating a tensor that already fed an op invalidates its tape.
  std::span<double> mutable_data();

  double item() const;  // requires size() == 1
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const;
  void set_requires_grad(bool b);

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Identity of the underlying node (grad accumulation target).
  const void* id() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
  friend class GradTape;
  friend struct OpCtx;
};

// Ordered record of executed differentiable ops. Constructing a tape makes it
// the active recording target for the current thread (tapes nest; innermost
// wins); destruction restores the previous one. backward() replays entries in
// exact reverse execution order.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  void backward(const Tensor& scalar_root);
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::function<void()> backprop;
  };
  std::vector<Entry> entries_;
  std::vector<std::shared_ptr<detail::Node>> touched_;
  friend struct OpCtx;
};

void backward(const Tensor& scalar_root, GradTape& tape);

// Suspends tape recording for its scope (frozen-teacher evaluation).
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;
};

// ---- elementwise ops (broadcast: shapes right-aligned, each trailing dim
// must match or be 1 on one side; missing leading dims act as 1) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor log(const Tensor& a);  // requires strictly positive input
Tensor exp(const Tensor& a);

// ---- reductions / reshaping ----
Tensor sum(const Tensor& a);   // -> shape {1}
Tensor mean(const Tensor& a);  // -> shape {1}
Tensor concat(const std::vector<Tensor>& parts);       // 1-d concat
Tensor slice_channels(const Tensor& a, int count);     // first `count` of dim 0

// ---- structured ops ----
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int padding);

enum class PoolMode { Max, Mean };
Tensor pool2d(const Tensor& input, int window, PoolMode mode);

Tensor upsample_bilinear(const Tensor& input, int factor);

// Softmax along `axis` with a per-class temperature vector (length = extent of
// `axis`, all entries > 0). Each class is divided by its temperature first,
// then normalized with a max-subtracted exponential.
Tensor softmax(const Tensor& logits, const std::vector<double>& temperature, int axis = -1);
Tensor log_softmax(const Tensor& logits, const std::vector<double>& temperature, int axis = -1);

// Half-open sub-region of the spatial plane.
struct Region {
  int r0, r1, c0, c1;
};

// For x[c,h,w] and each region R: emit the width-pooled slice (mean over
// columns, one value per (channel, row)) followed by the height-pooled slice
// (mean over rows, one value per (channel, column)), regions in given order.
// Output is 1-d.
Tensor region_pooled_slices(const Tensor& x, const std::vector<Region>& regions);

// Euclidean norm -> shape {1}. Gradient at the origin is taken as 0
// (subgradient choice), so distillation terms are safe when student == teacher.
Tensor l2_norm(const Tensor& v);

// Mean over pixels of -log softmax(logits[:,p])[labels[p]], logits [k,h,w].
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels);

// ---- gradient checking ----
struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = false;
  std::size_t coords_checked = 0;
};

// Compares tape gradients of f against central differences
// (f(x+h)-f(x-h))/(2h) per coordinate of every input. Pass iff every
// coordinate has relative error <= tol, with an absolute-error fallback when
// both magnitudes are below 1e-8. Throws if f is non-finite at any probe.
GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           const std::vector<Tensor>& inputs, double step, double tol);

}  // namespace catsd
