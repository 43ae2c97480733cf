#include "catsd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace catsd {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;

thread_local std::vector<GradTape*> g_tape_stack;

GradTape* active_tape() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  for (int d : shape) check(d > 0, "tensor extents must be positive");
  auto n = std::make_shared<detail::Node>();
  n->value.assign(shape_numel(shape), v);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  for (int d : shape) check(d > 0, "tensor extents must be positive");
  check(shape_numel(shape) == data.size(),
        "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

const Shape& Tensor::shape() const {
  check(defined(), "use of undefined tensor");
  return node_->shape;
}

int Tensor::dim(int i) const { return shape().at(static_cast<std::size_t>(i)); }

std::size_t Tensor::size() const { return defined() ? node_->value.size() : 0; }

std::span<const double> Tensor::data() const {
  check(defined(), "use of undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  check(defined(), "use of undefined tensor");
  return node_->value;
}

double Tensor::item() const {
  check(size() == 1, "item() requires a single-element tensor, got " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const Shape& s = shape();
  check(idx.size() == s.size(), "index rank mismatch");
  std::size_t flat = 0;
  std::size_t i = 0;
  for (int v : idx) {
    check(v >= 0 && v < s[i], "index out of bounds");
    flat = flat * static_cast<std::size_t>(s[i]) + static_cast<std::size_t>(v);
    ++i;
  }
  return node_->value[flat];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

void Tensor::set_requires_grad(bool b) {
  check(defined(), "use of undefined tensor");
  node_->requires_grad = b;
}

bool Tensor::has_grad() const { return defined() && node_->grad.size() == node_->value.size(); }

std::span<const double> Tensor::grad() const {
  check(has_grad(), "tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  check(defined(), "use of undefined tensor");
  node_->grad.assign(node_->value.size(), 0.0);
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

GradTape::GradTape() { g_tape_stack.push_back(this); }

GradTape::~GradTape() {
  if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

NoTapeScope::NoTapeScope() { g_tape_stack.push_back(nullptr); }
NoTapeScope::~NoTapeScope() {
  if (!g_tape_stack.empty() && g_tape_stack.back() == nullptr) g_tape_stack.pop_back();
}

void GradTape::backward(const Tensor& scalar_root) {
  check(scalar_root.defined() && scalar_root.size() == 1,
        "backward requires a scalar root");
  check(scalar_root.requires_grad(),
        "backward root does not depend on any tracked tensor on this tape");
  for (const auto& n : touched_) {
    if (n->requires_grad) n->grad.assign(n->value.size(), 0.0);
  }
  NodePtr root = scalar_root.node_;
  if (root->grad.size() != root->value.size()) root->grad.assign(root->value.size(), 0.0);
  root->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backprop();
}

void backward(const Tensor& scalar_root, GradTape& tape) { tape.backward(scalar_root); }

// Op construction helper shared by every differentiable op below.
struct OpCtx {
  static NodePtr node(const Tensor& t) { return t.node_; }

  static Tensor make(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return Tensor(std::move(n));
  }

  static std::span<double> grad_span(const NodePtr& n) {
    if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), 0.0);
    return n->grad;
  }

  static std::span<const double> out_grad(const NodePtr& n) { return n->grad; }

  static void record(const std::vector<const Tensor*>& inputs, Tensor& out,
                     std::function<void()> backprop) {
    GradTape* tape = active_tape();
    if (tape == nullptr) return;
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (!any) return;
    out.node_->requires_grad = true;
    for (const Tensor* t : inputs) tape->touched_.push_back(t->node_);
    tape->touched_.push_back(out.node_);
    tape->entries_.push_back({std::move(backprop)});
  }

  static void record(std::initializer_list<const Tensor*> inputs, Tensor& out,
                     std::function<void()> backprop) {
    record(std::vector<const Tensor*>(inputs.begin(), inputs.end()), out, std::move(backprop));
  }
};

namespace {

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

struct BroadcastPlan {
  Shape out_shape;
  std::vector<std::size_t> stride_a, stride_b;
  std::size_t n = 0;
  bool same_shape = false;
};

BroadcastPlan broadcast_plan(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out_shape = a;
    p.n = shape_numel(a);
    p.same_shape = true;
    return p;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  p.out_shape.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const int da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const int db = i < b.size() ? b[b.size() - 1 - i] : 1;
    check(da == db || da == 1 || db == 1,
          "shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
    p.out_shape[rank - 1 - i] = std::max(da, db);
  }
  auto strides_for = [&](const Shape& s) {
    std::vector<std::size_t> st(rank, 0);
    std::size_t acc = 1;
    for (std::size_t i = 0; i < rank; ++i) {
      const std::size_t d = rank - 1 - i;
      const int ext = i < s.size() ? s[s.size() - 1 - i] : 1;
      st[d] = (ext == 1) ? 0 : acc;
      acc *= static_cast<std::size_t>(ext);
    }
    return st;
  };
  p.stride_a = strides_for(a);
  p.stride_b = strides_for(b);
  p.n = shape_numel(p.out_shape);
  return p;
}

template <class F>
void bc_walk(const BroadcastPlan& p, F&& f) {
  if (p.same_shape) {
    for (std::size_t i = 0; i < p.n; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = p.out_shape.size();
  std::vector<int> idx(rank, 0);
  std::size_t offa = 0, offb = 0;
  for (std::size_t lin = 0; lin < p.n; ++lin) {
    f(lin, offa, offb);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      offa += p.stride_a[d];
      offb += p.stride_b[d];
      if (idx[d] < p.out_shape[d]) break;
      offa -= static_cast<std::size_t>(p.out_shape[d]) * p.stride_a[d];
      offb -= static_cast<std::size_t>(p.out_shape[d]) * p.stride_b[d];
      idx[d] = 0;
    }
  }
}

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind) {
  const BroadcastPlan plan = broadcast_plan(a.shape(), b.shape());
  std::vector<double> out(plan.n);
  const auto av = a.data();
  const auto bv = b.data();
  switch (kind) {
    case BinKind::Add:
      bc_walk(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] + bv[j]; });
      break;
    case BinKind::Sub:
      bc_walk(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] - bv[j]; });
      break;
    case BinKind::Mul:
      bc_walk(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] * bv[j]; });
      break;
  }
  Tensor result = OpCtx::make(plan.out_shape, std::move(out));
  NodePtr na = OpCtx::node(a), nb = OpCtx::node(b), nr = OpCtx::node(result);
  OpCtx::record({&a, &b}, result, [na, nb, nr, plan, kind]() {
    const auto g = OpCtx::out_grad(nr);
    const bool ga = na->requires_grad, gb = nb->requires_grad;
    std::span<double> da = ga ? OpCtx::grad_span(na) : std::span<double>{};
    std::span<double> db = gb ? OpCtx::grad_span(nb) : std::span<double>{};
    switch (kind) {
      case BinKind::Add:
        bc_walk(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
          if (ga) da[i] += g[o];
          if (gb) db[j] += g[o];
        });
        break;
      case BinKind::Sub:
        bc_walk(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
          if (ga) da[i] += g[o];
          if (gb) db[j] -= g[o];
        });
        break;
      case BinKind::Mul:
        bc_walk(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
          if (ga) da[i] += g[o] * nb->value[j];
          if (gb) db[j] += g[o] * na->value[i];
        });
        break;
    }
  });
  return result;
}

int normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  check(axis >= 0 && axis < r, "axis out of range");
  return axis;
}

struct AxisSplit {
  std::size_t outer = 1, k = 1, inner = 1;
};

AxisSplit axis_split(const Shape& s, int axis) {
  AxisSplit sp;
  for (int i = 0; i < axis; ++i) sp.outer *= static_cast<std::size_t>(s[i]);
  sp.k = static_cast<std::size_t>(s[axis]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i)
    sp.inner *= static_cast<std::size_t>(s[i]);
  return sp;
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul); }

Tensor scalar_mul(const Tensor& a, double s) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
  Tensor result = OpCtx::make(a.shape(), std::move(out));
  NodePtr na = OpCtx::node(a), nr = OpCtx::node(result);
  OpCtx::record({&a}, result, [na, nr, s]() {
    const auto g = OpCtx::out_grad(nr);
    auto da = OpCtx::grad_span(na);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += s * g[i];
  });
  return result;
}

Tensor relu(const Tensor& a) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  Tensor result = OpCtx::make(a.shape(), std::move(out));
  NodePtr na = OpCtx::node(a), nr = OpCtx::node(result);
  OpCtx::record({&a}, result, [na, nr]() {
    const auto g = OpCtx::out_grad(nr);
    auto da = OpCtx::grad_span(na);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (na->value[i] > 0.0) da[i] += g[i];
  });
  return result;
}

Tensor log(const Tensor& a) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    check(av[i] > 0.0, "log of non-positive value");
    out[i] = std::log(av[i]);
  }
  Tensor result = OpCtx::make(a.shape(), std::move(out));
  NodePtr na = OpCtx::node(a), nr = OpCtx::node(result);
  OpCtx::record({&a}, result, [na, nr]() {
    const auto g = OpCtx::out_grad(nr);
    auto da = OpCtx::grad_span(na);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] / na->value[i];
  });
  return result;
}

Tensor exp(const Tensor& a) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = std::exp(av[i]);
    check(std::isfinite(out[i]), "exp overflow to non-finite value");
  }
  Tensor result = OpCtx::make(a.shape(), std::move(out));
  NodePtr na = OpCtx::node(a), nr = OpCtx::node(result);
  OpCtx::record({&a}, result, [na, nr]() {
    const auto g = OpCtx::out_grad(nr);
    auto da = OpCtx::grad_span(na);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * nr->value[i];
  });
  return result;
}

// ---------------------------------------------------------------------------
// reductions / reshaping
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  const auto av = a.data();
  double s = 0.0;
  for (double v : av) s += v;
  Tensor result = OpCtx::make({1}, {s});
  NodePtr na = OpCtx::node(a), nr = OpCtx::node(result);
  OpCtx::record({&a}, result, [na, nr]() {
    const double g = OpCtx::out_grad(nr)[0];
    auto da = OpCtx::grad_span(na);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += g;
  });
  return result;
}

Tensor mean(const Tensor& a) {
  const auto av = a.data();
  double s = 0.0;
  for (double v : av) s += v;
  const double inv = 1.0 / static_cast<double>(av.size());
  Tensor result = OpCtx::make({1}, {s * inv});
  NodePtr na = OpCtx::node(a), nr = OpCtx::node(result);
  OpCtx::record({&a}, result, [na, nr, inv]() {
    const double g = OpCtx::out_grad(nr)[0] * inv;
    auto da = OpCtx::grad_span(na);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += g;
  });
  return result;
}

Tensor concat(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat of zero tensors");
  std::size_t total = 0;
  for (const Tensor& t : parts) {
    check(t.shape().size() == 1, "concat expects 1-d tensors");
    total += t.size();
  }
  std::vector<double> out;
  out.reserve(total);
  for (const Tensor& t : parts) {
    const auto v = t.data();
    out.insert(out.end(), v.begin(), v.end());
  }
  Tensor result = OpCtx::make({static_cast<int>(total)}, std::move(out));
  std::vector<NodePtr> ins;
  std::vector<const Tensor*> in_ptrs;
  ins.reserve(parts.size());
  in_ptrs.reserve(parts.size());
  for (const Tensor& t : parts) {
    ins.push_back(OpCtx::node(t));
    in_ptrs.push_back(&t);
  }
  NodePtr nr = OpCtx::node(result);
  OpCtx::record(in_ptrs, result, [ins = std::move(ins), nr]() {
    const auto g = OpCtx::out_grad(nr);
    std::size_t off = 0;
    for (const NodePtr& n : ins) {
      const std::size_t len = n->value.size();
      if (n->requires_grad) {
        auto dn = OpCtx::grad_span(n);
        for (std::size_t i = 0; i < len; ++i) dn[i] += g[off + i];
      }
      off += len;
    }
  });
  return result;
}

Tensor slice_channels(const Tensor& a, int count) {
  const Shape& s = a.shape();
  check(!s.empty(), "slice_channels on rank-0 tensor");
  check(count >= 1 && count <= s[0], "channel slice count out of range");
  const std::size_t block = shape_numel(s) / static_cast<std::size_t>(s[0]);
  const std::size_t keep = static_cast<std::size_t>(count) * block;
  Shape out_shape = s;
  out_shape[0] = count;
  const auto av = a.data();
  std::vector<double> out(av.begin(), av.begin() + static_cast<std::ptrdiff_t>(keep));
  Tensor result = OpCtx::make(std::move(out_shape), std::move(out));
  NodePtr na = OpCtx::node(a), nr = OpCtx::node(result);
  OpCtx::record({&a}, result, [na, nr, keep]() {
    const auto g = OpCtx::out_grad(nr);
    auto da = OpCtx::grad_span(na);
    for (std::size_t i = 0; i < keep; ++i) da[i] += g[i];
  });
  return result;
}

// ---------------------------------------------------------------------------
// conv / pool / upsample
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int padding) {
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  check(is.size() == 3, "conv2d input must be [c,h,w]");
  check(ks.size() == 4, "conv2d kernel must be [c_out,c_in,k,k]");
  check(padding >= 0, "negative padding");
  const int c_in = is[0], h = is[1], w = is[2];
  const int c_out = ks[0], k = ks[2];
  check(ks[1] == c_in, "kernel input channels mismatch");
  check(ks[2] == ks[3], "kernel must be square");
  check(k % 2 == 1, "kernel extent must be odd");
  check(bias.shape() == Shape{c_out}, "bias must be [c_out]");
  const int ho = h + 2 * padding - k + 1;
  const int wo = w + 2 * padding - k + 1;
  check(ho >= 1 && wo >= 1, "conv2d output extent < 1");

  std::vector<double> out(static_cast<std::size_t>(c_out) * ho * wo);
  const auto in = input.data();
  const auto kv = kernel.data();
  const auto bv = bias.data();
  for (int co = 0; co < c_out; ++co) {
    double* orow = out.data() + static_cast<std::size_t>(co) * ho * wo;
    std::fill(orow, orow + static_cast<std::size_t>(ho) * wo, bv[co]);
  }
  for (int co = 0; co < c_out; ++co) {
    for (int ci = 0; ci < c_in; ++ci) {
      const double* iplane = in.data() + static_cast<std::size_t>(ci) * h * w;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double wgt = kv[((static_cast<std::size_t>(co) * c_in + ci) * k + ky) * k + kx];
          if (wgt == 0.0) continue;
          const int ox_lo = std::max(0, padding - kx);
          const int ox_hi = std::min(wo, w + padding - kx);  // exclusive
          if (ox_lo >= ox_hi) continue;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy + ky - padding;
            if (iy < 0 || iy >= h) continue;
            double* orow = out.data() + (static_cast<std::size_t>(co) * ho + oy) * wo;
            const double* irow = iplane + static_cast<std::size_t>(iy) * w + (kx - padding);
            for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wgt * irow[ox];
          }
        }
      }
    }
  }

  Tensor result = OpCtx::make({c_out, ho, wo}, std::move(out));
  NodePtr ni = OpCtx::node(input), nk = OpCtx::node(kernel), nb = OpCtx::node(bias),
          nr = OpCtx::node(result);
  OpCtx::record({&input, &kernel, &bias}, result,
                [ni, nk, nb, nr, c_in, c_out, h, w, k, ho, wo, padding]() {
    const auto g = OpCtx::out_grad(nr);
    if (nb->requires_grad) {
      auto db = OpCtx::grad_span(nb);
      for (int co = 0; co < c_out; ++co) {
        const double* grow = g.data() + static_cast<std::size_t>(co) * ho * wo;
        double acc = 0.0;
        for (int i = 0; i < ho * wo; ++i) acc += grow[i];
        db[co] += acc;
      }
    }
    if (nk->requires_grad) {
      auto dk = OpCtx::grad_span(nk);
      for (int co = 0; co < c_out; ++co) {
        for (int ci = 0; ci < c_in; ++ci) {
          const double* iplane = ni->value.data() + static_cast<std::size_t>(ci) * h * w;
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const int ox_lo = std::max(0, padding - kx);
              const int ox_hi = std::min(wo, w + padding - kx);
              double acc = 0.0;
              for (int oy = 0; oy < ho; ++oy) {
                const int iy = oy + ky - padding;
                if (iy < 0 || iy >= h) continue;
                const double* grow = g.data() + (static_cast<std::size_t>(co) * ho + oy) * wo;
                const double* irow = iplane + static_cast<std::size_t>(iy) * w + (kx - padding);
                for (int ox = ox_lo; ox < ox_hi; ++ox) acc += grow[ox] * irow[ox];
              }
              dk[((static_cast<std::size_t>(co) * c_in + ci) * k + ky) * k + kx] += acc;
            }
          }
        }
      }
    }
    if (ni->requires_grad) {
      auto di = OpCtx::grad_span(ni);
      for (int co = 0; co < c_out; ++co) {
        for (int ci = 0; ci < c_in; ++ci) {
          double* dplane = di.data() + static_cast<std::size_t>(ci) * h * w;
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const double wgt =
                  nk->value[((static_cast<std::size_t>(co) * c_in + ci) * k + ky) * k + kx];
              if (wgt == 0.0) continue;
              const int ox_lo = std::max(0, padding - kx);
              const int ox_hi = std::min(wo, w + padding - kx);
              if (ox_lo >= ox_hi) continue;
              for (int oy = 0; oy < ho; ++oy) {
                const int iy = oy + ky - padding;
                if (iy < 0 || iy >= h) continue;
                const double* grow = g.data() + (static_cast<std::size_t>(co) * ho + oy) * wo;
                double* drow = dplane + static_cast<std::size_t>(iy) * w + (kx - padding);
                for (int ox = ox_lo; ox < ox_hi; ++ox) drow[ox] += wgt * grow[ox];
              }
            }
          }
        }
      }
    }
  });
  return result;
}

Tensor pool2d(const Tensor& input, int window, PoolMode mode) {
  const Shape& is = input.shape();
  check(is.size() == 3, "pool2d input must be [c,h,w]");
  check(window >= 1, "pool window must be >= 1");
  const int c = is[0], h = is[1], w = is[2];
  check(h % window == 0 && w % window == 0,
        "pool2d extents " + shape_str(is) + " not divisible by window " + std::to_string(window));
  const int ho = h / window, wo = w / window;
  const std::size_t n_out = static_cast<std::size_t>(c) * ho * wo;
  std::vector<double> out(n_out);
  std::vector<std::size_t> argmax;
  if (mode == PoolMode::Max) argmax.resize(n_out);
  const auto in = input.data();
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const std::size_t oidx = (static_cast<std::size_t>(ch) * ho + oy) * wo + ox;
        if (mode == PoolMode::Mean) {
          double acc = 0.0;
          for (int dy = 0; dy < window; ++dy) {
            const double* irow =
                in.data() + (static_cast<std::size_t>(ch) * h + oy * window + dy) * w + ox * window;
            for (int dx = 0; dx < window; ++dx) acc += irow[dx];
          }
          out[oidx] = acc / (static_cast<double>(window) * window);
        } else {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (int dy = 0; dy < window; ++dy) {
            const std::size_t row =
                (static_cast<std::size_t>(ch) * h + oy * window + dy) * w + ox * window;
            for (int dx = 0; dx < window; ++dx) {
              if (in[row + dx] > best) {
                best = in[row + dx];
                best_idx = row + dx;
              }
            }
          }
          out[oidx] = best;
          argmax[oidx] = best_idx;
        }
      }
    }
  }
  Tensor result = OpCtx::make({c, ho, wo}, std::move(out));
  NodePtr ni = OpCtx::node(input), nr = OpCtx::node(result);
  const double inv = 1.0 / (static_cast<double>(window) * window);
  OpCtx::record({&input}, result, [ni, nr, mode, window, inv, c, h, w, ho, wo,
                                   argmax = std::move(argmax)]() {
    const auto g = OpCtx::out_grad(nr);
    auto di = OpCtx::grad_span(ni);
    if (mode == PoolMode::Max) {
      for (std::size_t i = 0; i < g.size(); ++i) di[argmax[i]] += g[i];
      return;
    }
    for (int ch = 0; ch < c; ++ch) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const double gv = g[(static_cast<std::size_t>(ch) * ho + oy) * wo + ox] * inv;
          for (int dy = 0; dy < window; ++dy) {
            double* drow =
                di.data() + (static_cast<std::size_t>(ch) * h + oy * window + dy) * w + ox * window;
            for (int dx = 0; dx < window; ++dx) drow[dx] += gv;
          }
        }
      }
    }
  });
  return result;
}

namespace {
struct LerpTable {
  std::vector<int> lo, hi;
  std::vector<double> t;  // weight of hi
};

LerpTable lerp_table(int in_extent, int factor) {
  LerpTable tab;
  const int out_extent = in_extent * factor;
  tab.lo.resize(out_extent);
  tab.hi.resize(out_extent);
  tab.t.resize(out_extent);
  for (int o = 0; o < out_extent; ++o) {
    double s = (o + 0.5) / factor - 0.5;
    if (s < 0.0) s = 0.0;
    if (s > in_extent - 1) s = in_extent - 1;
    int lo = static_cast<int>(std::floor(s));
    if (lo > in_extent - 1) lo = in_extent - 1;
    tab.lo[o] = lo;
    tab.hi[o] = std::min(lo + 1, in_extent - 1);
    tab.t[o] = s - lo;
  }
  return tab;
}
}  // namespace

Tensor upsample_bilinear(const Tensor& input, int factor) {
  const Shape& is = input.shape();
  check(is.size() == 3, "upsample input must be [c,h,w]");
  check(factor >= 1, "upsample factor must be >= 1");
  const int c = is[0], h = is[1], w = is[2];
  const int ho = h * factor, wo = w * factor;
  const LerpTable ty = lerp_table(h, factor);
  const LerpTable tx = lerp_table(w, factor);
  const auto in = input.data();
  std::vector<double> out(static_cast<std::size_t>(c) * ho * wo);
  for (int ch = 0; ch < c; ++ch) {
    const double* iplane = in.data() + static_cast<std::size_t>(ch) * h * w;
    double* oplane = out.data() + static_cast<std::size_t>(ch) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      const double* r0 = iplane + static_cast<std::size_t>(ty.lo[oy]) * w;
      const double* r1 = iplane + static_cast<std::size_t>(ty.hi[oy]) * w;
      const double wy = ty.t[oy];
      double* orow = oplane + static_cast<std::size_t>(oy) * wo;
      for (int ox = 0; ox < wo; ++ox) {
        const double wx = tx.t[ox];
        const int x0 = tx.lo[ox], x1 = tx.hi[ox];
        const double top = r0[x0] * (1.0 - wx) + r0[x1] * wx;
        const double bot = r1[x0] * (1.0 - wx) + r1[x1] * wx;
        orow[ox] = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  Tensor result = OpCtx::make({c, ho, wo}, std::move(out));
  NodePtr ni = OpCtx::node(input), nr = OpCtx::node(result);
  OpCtx::record({&input}, result, [ni, nr, ty, tx, c, h, w, ho, wo]() {
    const auto g = OpCtx::out_grad(nr);
    auto di = OpCtx::grad_span(ni);
    for (int ch = 0; ch < c; ++ch) {
      double* dplane = di.data() + static_cast<std::size_t>(ch) * h * w;
      const double* gplane = g.data() + static_cast<std::size_t>(ch) * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        const double wy = ty.t[oy];
        double* d0 = dplane + static_cast<std::size_t>(ty.lo[oy]) * w;
        double* d1 = dplane + static_cast<std::size_t>(ty.hi[oy]) * w;
        const double* grow = gplane + static_cast<std::size_t>(oy) * wo;
        for (int ox = 0; ox < wo; ++ox) {
          const double wx = tx.t[ox];
          const int x0 = tx.lo[ox], x1 = tx.hi[ox];
          const double gv = grow[ox];
          d0[x0] += gv * (1.0 - wy) * (1.0 - wx);
          d0[x1] += gv * (1.0 - wy) * wx;
          d1[x0] += gv * wy * (1.0 - wx);
          d1[x1] += gv * wy * wx;
        }
      }
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

namespace {
void check_temps(const std::vector<double>& temps, std::size_t k) {
  check(temps.size() == k, "temperature vector length " + std::to_string(temps.size()) +
                               " does not match class extent " + std::to_string(k));
  for (double t : temps) check(t > 0.0, "non-positive temperature");
}
}  // namespace

Tensor softmax(const Tensor& logits, const std::vector<double>& temperature, int axis) {
  const Shape& s = logits.shape();
  const int ax = normalize_axis(axis, s.size());
  const AxisSplit sp = axis_split(s, ax);
  check_temps(temperature, sp.k);
  const auto in = logits.data();
  std::vector<double> out(in.size());
  std::vector<double> u(sp.k);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.k * sp.inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < sp.k; ++c) {
        u[c] = in[base + c * sp.inner] / temperature[c];
        m = std::max(m, u[c]);
      }
      double z = 0.0;
      for (std::size_t c = 0; c < sp.k; ++c) {
        u[c] = std::exp(u[c] - m);
        z += u[c];
      }
      for (std::size_t c = 0; c < sp.k; ++c) out[base + c * sp.inner] = u[c] / z;
    }
  }
  Tensor result = OpCtx::make(s, std::move(out));
  NodePtr ni = OpCtx::node(logits), nr = OpCtx::node(result);
  OpCtx::record({&logits}, result, [ni, nr, sp, temperature]() {
    const auto g = OpCtx::out_grad(nr);
    auto di = OpCtx::grad_span(ni);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.k * sp.inner + i;
        double dot = 0.0;
        for (std::size_t c = 0; c < sp.k; ++c)
          dot += g[base + c * sp.inner] * nr->value[base + c * sp.inner];
        for (std::size_t c = 0; c < sp.k; ++c) {
          const std::size_t idx = base + c * sp.inner;
          di[idx] += nr->value[idx] * (g[idx] - dot) / temperature[c];
        }
      }
    }
  });
  return result;
}

Tensor log_softmax(const Tensor& logits, const std::vector<double>& temperature, int axis) {
  const Shape& s = logits.shape();
  const int ax = normalize_axis(axis, s.size());
  const AxisSplit sp = axis_split(s, ax);
  check_temps(temperature, sp.k);
  const auto in = logits.data();
  std::vector<double> out(in.size());
  std::vector<double> u(sp.k);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.k * sp.inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < sp.k; ++c) {
        u[c] = in[base + c * sp.inner] / temperature[c];
        m = std::max(m, u[c]);
      }
      double z = 0.0;
      for (std::size_t c = 0; c < sp.k; ++c) z += std::exp(u[c] - m);
      const double lse = m + std::log(z);
      for (std::size_t c = 0; c < sp.k; ++c) out[base + c * sp.inner] = u[c] - lse;
    }
  }
  Tensor result = OpCtx::make(s, std::move(out));
  NodePtr ni = OpCtx::node(logits), nr = OpCtx::node(result);
  OpCtx::record({&logits}, result, [ni, nr, sp, temperature]() {
    const auto g = OpCtx::out_grad(nr);
    auto di = OpCtx::grad_span(ni);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.k * sp.inner + i;
        double gsum = 0.0;
        for (std::size_t c = 0; c < sp.k; ++c) gsum += g[base + c * sp.inner];
        for (std::size_t c = 0; c < sp.k; ++c) {
          const std::size_t idx = base + c * sp.inner;
          const double y = std::exp(nr->value[idx]);
          di[idx] += (g[idx] - y * gsum) / temperature[c];
        }
      }
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// pooled slices / norms / cross entropy
// ---------------------------------------------------------------------------

Tensor region_pooled_slices(const Tensor& x, const std::vector<Region>& regions) {
  const Shape& s = x.shape();
  check(s.size() == 3, "region_pooled_slices input must be [c,h,w]");
  const int c = s[0], h = s[1], w = s[2];
  std::size_t total = 0;
  for (const Region& r : regions) {
    check(0 <= r.r0 && r.r0 < r.r1 && r.r1 <= h && 0 <= r.c0 && r.c0 < r.c1 && r.c1 <= w,
          "region out of bounds");
    total += static_cast<std::size_t>(c) * ((r.r1 - r.r0) + (r.c1 - r.c0));
  }
  check(total > 0, "no regions given");
  const auto in = x.data();
  std::vector<double> out;
  out.reserve(total);
  for (const Region& r : regions) {
    const double inv_w = 1.0 / static_cast<double>(r.c1 - r.c0);
    const double inv_h = 1.0 / static_cast<double>(r.r1 - r.r0);
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = in.data() + static_cast<std::size_t>(ch) * h * w;
      for (int row = r.r0; row < r.r1; ++row) {
        const double* prow = plane + static_cast<std::size_t>(row) * w;
        double acc = 0.0;
        for (int col = r.c0; col < r.c1; ++col) acc += prow[col];
        out.push_back(acc * inv_w);
      }
    }
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = in.data() + static_cast<std::size_t>(ch) * h * w;
      for (int col = r.c0; col < r.c1; ++col) {
        double acc = 0.0;
        for (int row = r.r0; row < r.r1; ++row) acc += plane[static_cast<std::size_t>(row) * w + col];
        out.push_back(acc * inv_h);
      }
    }
  }
  Tensor result = OpCtx::make({static_cast<int>(total)}, std::move(out));
  NodePtr ni = OpCtx::node(x), nr = OpCtx::node(result);
  OpCtx::record({&x}, result, [ni, nr, regions, c, h, w]() {
    const auto g = OpCtx::out_grad(nr);
    auto di = OpCtx::grad_span(ni);
    std::size_t pos = 0;
    for (const Region& r : regions) {
      const double inv_w = 1.0 / static_cast<double>(r.c1 - r.c0);
      const double inv_h = 1.0 / static_cast<double>(r.r1 - r.r0);
      for (int ch = 0; ch < c; ++ch) {
        double* plane = di.data() + static_cast<std::size_t>(ch) * h * w;
        for (int row = r.r0; row < r.r1; ++row) {
          const double gv = g[pos++] * inv_w;
          double* prow = plane + static_cast<std::size_t>(row) * w;
          for (int col = r.c0; col < r.c1; ++col) prow[col] += gv;
        }
      }
      for (int ch = 0; ch < c; ++ch) {
        double* plane = di.data() + static_cast<std::size_t>(ch) * h * w;
        for (int col = r.c0; col < r.c1; ++col) {
          const double gv = g[pos++] * inv_h;
          for (int row = r.r0; row < r.r1; ++row) plane[static_cast<std::size_t>(row) * w + col] += gv;
        }
      }
    }
  });
  return result;
}

Tensor l2_norm(const Tensor& v) {
  const auto in = v.data();
  double acc = 0.0;
  for (double x : in) acc += x * x;
  const double norm = std::sqrt(acc);
  Tensor result = OpCtx::make({1}, {norm});
  NodePtr ni = OpCtx::node(v), nr = OpCtx::node(result);
  OpCtx::record({&v}, result, [ni, nr, norm]() {
    if (norm == 0.0) return;  // subgradient 0 at the origin
    const double g = OpCtx::out_grad(nr)[0] / norm;
    auto di = OpCtx::grad_span(ni);
    for (std::size_t i = 0; i < di.size(); ++i) di[i] += g * ni->value[i];
  });
  return result;
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels) {
  const Shape& s = logits.shape();
  check(s.size() == 3, "cross_entropy_mean expects logits [k,h,w]");
  const int k = s[0], h = s[1], w = s[2];
  const std::size_t npix = static_cast<std::size_t>(h) * w;
  check(labels.size() == npix, "label count does not match logits spatial extent");
  for (int y : labels) check(y >= 0 && y < k, "label id outside logit channels");
  const auto in = logits.data();
  double loss = 0.0;
  for (std::size_t p = 0; p < npix; ++p) {
    double m = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) m = std::max(m, in[static_cast<std::size_t>(c) * npix + p]);
    double z = 0.0;
    for (int c = 0; c < k; ++c) z += std::exp(in[static_cast<std::size_t>(c) * npix + p] - m);
    const double lse = m + std::log(z);
    loss += lse - in[static_cast<std::size_t>(labels[p]) * npix + p];
  }
  loss /= static_cast<double>(npix);
  Tensor result = OpCtx::make({1}, {loss});
  NodePtr ni = OpCtx::node(logits), nr = OpCtx::node(result);
  OpCtx::record({&logits}, result, [ni, nr, labels, k, npix]() {
    const double g = OpCtx::out_grad(nr)[0] / static_cast<double>(npix);
    auto di = OpCtx::grad_span(ni);
    for (std::size_t p = 0; p < npix; ++p) {
      double m = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c)
        m = std::max(m, ni->value[static_cast<std::size_t>(c) * npix + p]);
      double z = 0.0;
      for (int c = 0; c < k; ++c)
        z += std::exp(ni->value[static_cast<std::size_t>(c) * npix + p] - m);
      for (int c = 0; c < k; ++c) {
        const std::size_t idx = static_cast<std::size_t>(c) * npix + p;
        const double soft = std::exp(ni->value[idx] - m) / z;
        di[idx] += g * (soft - (labels[p] == c ? 1.0 : 0.0));
      }
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// grad check
// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           const std::vector<Tensor>& inputs, double step, double tol) {
  check(step > 0.0, "grad_check step must be > 0");
  auto clone_inputs = [&](bool requires_grad) {
    std::vector<Tensor> copy;
    copy.reserve(inputs.size());
    for (const Tensor& t : inputs) {
      copy.push_back(Tensor::from_data(t.shape(),
                                       std::vector<double>(t.data().begin(), t.data().end()),
                                       requires_grad));
    }
    return copy;
  };

  std::vector<Tensor> tracked = clone_inputs(true);
  std::vector<std::vector<double>> analytic(inputs.size());
  {
    GradTape tape;
    Tensor loss = f(tracked);
    check(loss.size() == 1, "grad_check loss must be scalar");
    check(std::isfinite(loss.item()), "non-finite loss at base point");
    tape.backward(loss);
    for (std::size_t i = 0; i < tracked.size(); ++i) {
      if (tracked[i].has_grad()) {
        const auto g = tracked[i].grad();
        analytic[i].assign(g.begin(), g.end());
      } else {
        analytic[i].assign(tracked[i].size(), 0.0);
      }
    }
  }

  GradCheckReport report;
  report.pass = true;
  NoTapeScope no_tape;
  std::vector<Tensor> probe = clone_inputs(false);
  auto eval = [&]() {
    Tensor loss = f(probe);
    check(loss.size() == 1, "grad_check loss must be scalar");
    const double v = loss.item();
    check(std::isfinite(v), "non-finite loss at probe point");
    return v;
  };
  for (std::size_t i = 0; i < probe.size(); ++i) {
    auto buf = probe[i].mutable_data();
    for (std::size_t j = 0; j < buf.size(); ++j) {
      const double orig = buf[j];
      buf[j] = orig + step;
      const double fp = eval();
      buf[j] = orig - step;
      const double fm = eval();
      buf[j] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      const double a = analytic[i][j];
      const double denom = std::max(std::abs(a), std::abs(fd));
      ++report.coords_checked;
      if (denom <= 1e-8) {
        if (std::abs(a - fd) > 1e-8) report.pass = false;
        continue;
      }
      const double rel = std::abs(a - fd) / denom;
      report.max_rel_error = std::max(report.max_rel_error, rel);
    }
  }
  if (report.max_rel_error > tol) report.pass = false;
  return report;
}

}  // namespace catsd
