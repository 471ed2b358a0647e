#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a shared handle to storage (shape, data, optional grad). Every
// primitive takes the Tape of the current forward pass; when any input
// requires a gradient the primitive records a node whose backward rule
// accumulates into the inputs' grad buffers. One tape serves one forward
// pass and may be backpropagated exactly once.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "siban/errors.hpp"

namespace siban {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : p_(std::make_shared<TensorStorage<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
    }
    if (numel(shape) != data.size()) {
      throw ShapeError("shape " + to_string(shape) + " does not match " +
                       std::to_string(data.size()) + " elements");
    }
    p_->shape = std::move(shape);
    p_->data = std::move(data);
    p_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> data(numel(shape), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  std::size_t rank() const { return p_->shape.size(); }
  std::size_t dim(std::size_t i) const { return p_->shape.at(i); }
  std::size_t size() const { return p_->data.size(); }

  const std::vector<T>& data() const { return p_->data; }
  std::vector<T>& mutable_data() { return p_->data; }

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool on) { p_->requires_grad = on; }

  bool has_grad() const { return p_->grad.size() == p_->data.size(); }
  // Zeros when nothing has been accumulated.
  std::vector<T> grad() const {
    return has_grad() ? p_->grad : std::vector<T>(p_->data.size(), T(0));
  }
  std::vector<T>& mutable_grad() {
    p_->ensure_grad();
    return p_->grad;
  }
  void clear_grad() { p_->grad.clear(); }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return p_->data[0];
  }

  T operator[](std::size_t i) const { return p_->data[i]; }

  // Deep copy without gradient state.
  Tensor clone() const { return Tensor(shape(), data(), false); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(size());
    std::transform(data().begin(), data().end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape(), std::move(out), requires_grad());
  }

  const std::shared_ptr<TensorStorage<T>>& storage() const { return p_; }

 private:
  std::shared_ptr<TensorStorage<T>> p_;
};

enum class Primitive {
  kAdd,
  kSub,
  kMul,
  kMatMul,
  kConv2d,
  kRelu,
  kLeakyRelu,
  kSigmoid,
  kSoftmax,
  kLogSoftmax,
  kLog,
  kExp,
  kExpm1,
  kSquare,
  kSoftplus,
  kClamp,
  kSum,
  kMean,
  kConcat,
  kUpsampleNearest,
  kStopGradient,
};

inline std::string_view primitive_name(Primitive op) {
  switch (op) {
    case Primitive::kAdd: return "add";
    case Primitive::kSub: return "sub";
    case Primitive::kMul: return "mul";
    case Primitive::kMatMul: return "matmul";
    case Primitive::kConv2d: return "conv2d";
    case Primitive::kRelu: return "relu";
    case Primitive::kLeakyRelu: return "leaky_relu";
    case Primitive::kSigmoid: return "sigmoid";
    case Primitive::kSoftmax: return "softmax";
    case Primitive::kLogSoftmax: return "log_softmax";
    case Primitive::kLog: return "log";
    case Primitive::kExp: return "exp";
    case Primitive::kExpm1: return "expm1";
    case Primitive::kSquare: return "square";
    case Primitive::kSoftplus: return "softplus";
    case Primitive::kClamp: return "clamp";
    case Primitive::kSum: return "sum";
    case Primitive::kMean: return "mean";
    case Primitive::kConcat: return "concat";
    case Primitive::kUpsampleNearest: return "upsample_nearest";
    case Primitive::kStopGradient: return "stop_gradient";
  }
  return "?";
}

inline Primitive parse_primitive(std::string_view name) {
  for (int i = 0; i <= static_cast<int>(Primitive::kStopGradient); ++i) {
    auto op = static_cast<Primitive>(i);
    if (primitive_name(op) == name) return op;
  }
  throw std::invalid_argument("unknown primitive '" + std::string(name) + "'");
}

// Op-specific attributes; each primitive reads only the fields it needs.
struct Attrs {
  std::size_t stride = 1;   // conv2d
  std::size_t padding = 0;  // conv2d
  double slope = 0.2;       // leaky_relu
  int axis = 1;             // softmax, log_softmax, concat
  std::vector<int> axes;    // sum, mean; empty reduces everything
  std::size_t factor = 2;   // upsample_nearest
  double lo = -1.0;         // clamp
  double hi = 1.0;
};

template <typename T>
class Tape {
 public:
  using StoragePtr = std::shared_ptr<TensorStorage<T>>;
  using BackwardFn = std::function<void(const std::vector<T>& grad_out)>;

  enum class Mode { kRecord, kNoGrad };

  explicit Tape(Mode mode = Mode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::kRecord && !consumed_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording()) return false;
    for (auto* t : inputs) {
      if (t->defined() && t->requires_grad()) return true;
    }
    return false;
  }

  void record(Primitive op, std::vector<StoragePtr> inputs, const Tensor<T>& output, BackwardFn fn) {
    output.storage()->requires_grad = true;
    nodes_.push_back(Node{op, std::move(inputs), output.storage(), std::move(fn)});
  }

  // Accumulates d(loss)/d(leaf) into every requires_grad tensor reachable
  // from `loss`. The tape is consumed afterwards.
  void backward(const Tensor<T>& loss) {
    if (consumed_) throw TapeError("backward called on a consumed tape");
    if (loss.size() != 1) throw TapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
    consumed_ = true;
    if (!loss.requires_grad()) {
      nodes_.clear();
      return;
    }
    auto& seed = loss.storage()->grad;
    seed.assign(1, T(0));
    seed[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto& node = *it;
      if (node.output->grad.size() != node.output->data.size()) continue;  // unreachable
      for (auto& in : node.inputs) {
        if (in && in->requires_grad) in->ensure_grad();
      }
      node.backward(node.output->grad);
    }
    nodes_.clear();
  }

 private:
  struct Node {
    Primitive op;
    std::vector<StoragePtr> inputs;
    StoragePtr output;
    BackwardFn backward;
  };

  Mode mode_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
void check_finite(Primitive op, const std::vector<T>& values) {
  for (T v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(primitive_name(op)) + " produced a non-finite value");
    }
  }
}

template <typename T>
bool grad_target(const std::shared_ptr<TensorStorage<T>>& s) {
  return s && s->requires_grad;
}

// Elementwise unary primitive. `deriv(x, y)` is dy/dx.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(Tape<T>& tape, Primitive op, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  std::vector<T> out(x.size());
  const auto& xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  check_finite(op, out);
  Tensor<T> y(x.shape(), std::move(out));
  if (tape.wants_grad({&x})) {
    auto xs = x.storage();
    auto ys = y.storage().get();
    tape.record(op, {xs}, y, [xs, ys, deriv](const std::vector<T>& g) {
      auto& gx = xs->grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xs->data[i], ys->data[i]);
    });
  }
  return y;
}

// Broadcasting aligns trailing axes; each axis must match or be 1 on one side.
struct BroadcastPlan {
  Shape out;
  bool same = false;
  bool b_scalar = false;
  bool a_scalar = false;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  plan.out.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] == pb[d] || pb[d] == 1) {
      plan.out[d] = pa[d];
    } else if (pa[d] == 1) {
      plan.out[d] = pb[d];
    } else {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
  }
  if (numel(b) == 1 && plan.out == a) {
    plan.b_scalar = true;
    return plan;
  }
  if (numel(a) == 1 && plan.out == b) {
    plan.a_scalar = true;
    return plan;
  }
  auto strides = [rank](const Shape& s) {
    std::vector<std::size_t> st(rank, 0);
    std::size_t acc = 1;
    for (std::size_t d = rank; d-- > 0;) {
      st[d] = s[d] == 1 ? 0 : acc;
      acc *= s[d];
    }
    return st;
  };
  const auto sa = strides(pa), sb = strides(pb);
  const std::size_t n = numel(plan.out);
  plan.a_index.resize(n);
  plan.b_index.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    plan.a_index[i] = ia;
    plan.b_index[i] = ib;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < plan.out[d]) break;
      ia -= sa[d] * idx[d];
      ib -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return plan;
}

template <typename T>
std::size_t a_at(const BroadcastPlan& p, std::size_t i) {
  return p.same || p.b_scalar ? i : (p.a_scalar ? 0 : p.a_index[i]);
}
template <typename T>
std::size_t b_at(const BroadcastPlan& p, std::size_t i) {
  return p.same || p.a_scalar ? i : (p.b_scalar ? 0 : p.b_index[i]);
}

// Elementwise binary primitive. `da(a, b)` and `db(a, b)` are partials.
template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary(Tape<T>& tape, Primitive op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da da, Db db) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
  const std::size_t n = numel(plan->out);
  std::vector<T> out(n);
  const auto& ad = a.data();
  const auto& bd = b.data();
  if (plan->same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[i]);
  } else if (plan->b_scalar) {
    const T bv = bd[0];
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bv);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[a_at<T>(*plan, i)], bd[b_at<T>(*plan, i)]);
  }
  check_finite(op, out);
  Tensor<T> y(plan->out, std::move(out));
  if (tape.wants_grad({&a, &b})) {
    auto as = a.storage();
    auto bs = b.storage();
    tape.record(op, {as, bs}, y, [as, bs, plan, da, db](const std::vector<T>& g) {
      const bool ga = as->requires_grad, gb = bs->requires_grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t ia = a_at<T>(*plan, i), ib = b_at<T>(*plan, i);
        const T av = as->data[ia], bv = bs->data[ib];
        if (ga) as->grad[ia] += g[i] * da(av, bv);
        if (gb) bs->grad[ib] += g[i] * db(av, bv);
      }
    });
  }
  return y;
}

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      tape, Primitive::kAdd, a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      tape, Primitive::kSub, a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      tape, Primitive::kMul, a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

// Multiplication by a constant, expressed as a broadcast mul.
template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
  return mul(tape, a, Tensor<T>::scalar(factor));
}

template <typename T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& a, T value) {
  return add(tape, a, Tensor<T>::scalar(value));
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(
      tape, Primitive::kRelu, x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(Tape<T>& tape, const Tensor<T>& x, double slope) {
  const T s = static_cast<T>(slope);
  return detail::unary(
      tape, Primitive::kLeakyRelu, x, [s](T v) { return v > T(0) ? v : s * v; },
      [s](T v, T) { return v > T(0) ? T(1) : s; });
}

template <typename T>
T sigmoid_value(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(
      tape, Primitive::kSigmoid, x, [](T v) { return sigmoid_value(v); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
T softplus_value(T v) {
  return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
}

// log(1 + exp(x)); -log(sigmoid(x)) == softplus(-x) without underflow.
template <typename T>
Tensor<T> softplus(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(
      tape, Primitive::kSoftplus, x, [](T v) { return softplus_value(v); },
      [](T v, T) { return sigmoid_value(v); });
}

template <typename T>
Tensor<T> log(Tape<T>& tape, const Tensor<T>& x) {
  for (T v : x.data()) {
    if (!(v > T(0))) throw NumericError("log of non-positive value");
  }
  return detail::unary(
      tape, Primitive::kLog, x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> exp(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(
      tape, Primitive::kExp, x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

// exp(x) - 1, accurate near zero.
template <typename T>
Tensor<T> expm1(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(
      tape, Primitive::kExpm1, x, [](T v) { return std::expm1(v); }, [](T, T y) { return y + T(1); });
}

template <typename T>
Tensor<T> square(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(
      tape, Primitive::kSquare, x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// Values outside [lo, hi] are pinned and pass no gradient.
template <typename T>
Tensor<T> clamp(Tape<T>& tape, const Tensor<T>& x, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  const T l = static_cast<T>(lo), h = static_cast<T>(hi);
  return detail::unary(
      tape, Primitive::kClamp, x, [l, h](T v) { return std::min(std::max(v, l), h); },
      [l, h](T v, T) { return (v >= l && v <= h) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return x.clone();
}

// ---------------------------------------------------------------------------
// Reductions and shape primitives

namespace detail {

template <typename T>
Tensor<T> reduce(Tape<T>& tape, Primitive op, const Tensor<T>& x, std::vector<int> axes) {
  const std::size_t rank = x.rank();
  std::vector<bool> reduced(rank, axes.empty());
  for (int a : axes) reduced[normalize_axis(a, rank)] = true;
  Shape out_shape;
  std::vector<std::size_t> out_stride(rank, 0);
  {
    std::size_t acc = 1;
    for (std::size_t d = rank; d-- > 0;) {
      if (!reduced[d]) {
        out_stride[d] = acc;
        acc *= x.shape()[d];
      }
    }
    for (std::size_t d = 0; d < rank; ++d) {
      if (!reduced[d]) out_shape.push_back(x.shape()[d]);
    }
    if (out_shape.empty()) out_shape.push_back(1);
  }
  const std::size_t count = x.size() / numel(out_shape);
  auto map = std::make_shared<std::vector<std::size_t>>(x.size());
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t o = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      (*map)[i] = o;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        o += out_stride[d];
        if (idx[d] < x.shape()[d]) break;
        o -= out_stride[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  const T norm = op == Primitive::kMean ? T(1) / static_cast<T>(count) : T(1);
  std::vector<T> out(numel(out_shape), T(0));
  const auto& xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) out[(*map)[i]] += xd[i];
  if (op == Primitive::kMean) {
    for (auto& v : out) v *= norm;
  }
  check_finite(op, out);
  Tensor<T> y(out_shape, std::move(out));
  if (tape.wants_grad({&x})) {
    auto xs = x.storage();
    tape.record(op, {xs}, y, [xs, map, norm](const std::vector<T>& g) {
      for (std::size_t i = 0; i < xs->grad.size(); ++i) xs->grad[i] += g[(*map)[i]] * norm;
    });
  }
  return y;
}

// Splits a shape around `axis` into (outer, axis length, inner).
inline std::array<std::size_t, 3> split_axis(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  return {outer, s[axis], inner};
}

}  // namespace detail

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x, std::vector<int> axes = {}) {
  return detail::reduce(tape, Primitive::kSum, x, std::move(axes));
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x, std::vector<int> axes = {}) {
  return detail::reduce(tape, Primitive::kMean, x, std::move(axes));
}

namespace detail {

template <typename T>
Tensor<T> softmax_impl(Tape<T>& tape, const Tensor<T>& x, int axis, bool log_space) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto [outer, len, inner] = split_axis(x.shape(), ax);
  const auto& xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xd[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
      T total = T(0);
      for (std::size_t k = 0; k < len; ++k) total += std::exp(xd[base + k * inner] - mx);
      const T log_total = std::log(total);
      for (std::size_t k = 0; k < len; ++k) {
        const T shifted = xd[base + k * inner] - mx;
        out[base + k * inner] = log_space ? shifted - log_total : std::exp(shifted) / total;
      }
    }
  }
  const Primitive op = log_space ? Primitive::kLogSoftmax : Primitive::kSoftmax;
  check_finite(op, out);
  Tensor<T> y(x.shape(), std::move(out));
  if (tape.wants_grad({&x})) {
    auto xs = x.storage();
    auto ys = y.storage().get();
    tape.record(op, {xs}, y, [xs, ys, outer, len, inner, log_space](const std::vector<T>& g) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T acc = T(0);
          if (log_space) {
            for (std::size_t k = 0; k < len; ++k) acc += g[base + k * inner];
            for (std::size_t k = 0; k < len; ++k) {
              const std::size_t i = base + k * inner;
              xs->grad[i] += g[i] - std::exp(ys->data[i]) * acc;
            }
          } else {
            for (std::size_t k = 0; k < len; ++k) acc += g[base + k * inner] * ys->data[base + k * inner];
            for (std::size_t k = 0; k < len; ++k) {
              const std::size_t i = base + k * inner;
              xs->grad[i] += ys->data[i] * (g[i] - acc);
            }
          }
        }
      }
    });
  }
  return y;
}

}  // namespace detail

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, int axis) {
  return detail::softmax_impl(tape, x, axis, false);
}

template <typename T>
Tensor<T> log_softmax(Tape<T>& tape, const Tensor<T>& x, int axis) {
  return detail::softmax_impl(tape, x, axis, true);
}

template <typename T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t ax = detail::normalize_axis(axis, xs[0].rank());
  Shape out_shape = xs[0].shape();
  out_shape[ax] = 0;
  for (const auto& x : xs) {
    if (x.rank() != out_shape.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      if (d != ax && x.shape()[d] != out_shape[d]) {
        throw ShapeError("concat shape mismatch: " + to_string(x.shape()) + " vs " + to_string(xs[0].shape()));
      }
    }
    out_shape[ax] += x.shape()[ax];
  }
  const auto [outer, total_len, inner] = detail::split_axis(out_shape, ax);
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::size_t len = x.shape()[ax];
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(o * len * inner), len * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total_len + off) * inner));
    }
    off += len;
  }
  Tensor<T> y(out_shape, std::move(out));
  bool any = false;
  for (const auto& x : xs) any = any || x.requires_grad();
  if (tape.recording() && any) {
    std::vector<typename Tape<T>::StoragePtr> inputs;
    for (const auto& x : xs) inputs.push_back(x.storage());
    tape.record(Primitive::kConcat, inputs, y,
                [inputs, offsets, outer = outer, total_len = total_len, inner = inner, ax](const std::vector<T>& g) {
                  for (std::size_t n = 0; n < inputs.size(); ++n) {
                    auto& s = inputs[n];
                    if (!s->requires_grad) continue;
                    const std::size_t len = s->shape[ax];
                    for (std::size_t o = 0; o < outer; ++o) {
                      for (std::size_t j = 0; j < len * inner; ++j) {
                        s->grad[o * len * inner + j] += g[(o * total_len + offsets[n]) * inner + j];
                      }
                    }
                  }
                });
  }
  return y;
}

// Nearest-neighbour upsampling of a [B, C, H, W] tensor by an integer factor.
template <typename T>
Tensor<T> upsample_nearest(Tape<T>& tape, const Tensor<T>& x, std::size_t factor) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest expects [B,C,H,W], got " + to_string(x.shape()));
  if (factor == 0) throw std::invalid_argument("upsample factor must be positive");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  std::vector<T> out(planes * oh * ow);
  const auto& xd = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) out[(p * oh + i) * ow + j] = xd[(p * h + i / factor) * w + j / factor];
    }
  }
  Tensor<T> y(Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out));
  if (tape.wants_grad({&x})) {
    auto xs = x.storage();
    tape.record(Primitive::kUpsampleNearest, {xs}, y, [xs, planes, h, w, factor](const std::vector<T>& g) {
      const std::size_t oh = h * factor, ow = w * factor;
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < oh; ++i) {
          for (std::size_t j = 0; j < ow; ++j) xs->grad[(p * h + i / factor) * w + j / factor] += g[(p * oh + i) * ow + j];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Linear primitives

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  using M = detail::RowMatrix<T>;
  const auto m = static_cast<Eigen::Index>(a.dim(0)), k = static_cast<Eigen::Index>(a.dim(1)),
             n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<T> out(static_cast<std::size_t>(m * n));
  Eigen::Map<M>(out.data(), m, n).noalias() =
      Eigen::Map<const M>(a.data().data(), m, k) * Eigen::Map<const M>(b.data().data(), k, n);
  detail::check_finite(Primitive::kMatMul, out);
  Tensor<T> y(Shape{a.dim(0), b.dim(1)}, std::move(out));
  if (tape.wants_grad({&a, &b})) {
    auto as = a.storage();
    auto bs = b.storage();
    tape.record(Primitive::kMatMul, {as, bs}, y, [as, bs, m, k, n](const std::vector<T>& g) {
      Eigen::Map<const M> G(g.data(), m, n);
      if (as->requires_grad) {
        Eigen::Map<M>(as->grad.data(), m, k).noalias() += G * Eigen::Map<const M>(bs->data.data(), k, n).transpose();
      }
      if (bs->requires_grad) {
        Eigen::Map<M>(bs->grad.data(), k, n).noalias() += Eigen::Map<const M>(as->data.data(), m, k).transpose() * G;
      }
    });
  }
  return y;
}

inline std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (in + 2 * padding < kernel) return 0;
  return (in + 2 * padding - kernel) / stride + 1;
}

// Cross-correlation of x [B,Cin,H,W] with w [Cout,Cin,k,k] plus an optional
// bias [Cout]. Output [B,Cout,H',W'], H' = floor((H + 2p - k)/s) + 1.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d expects x [B,C,H,W] and square w [Co,Ci,k,k], got " + to_string(x.shape()) + " and " +
                     to_string(w.shape()));
  }
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(x.dim(1)) + ", kernel expects " +
                     std::to_string(w.dim(1)));
  }
  if (bias.defined() && (bias.size() != w.dim(0))) throw ShapeError("conv2d bias must have Cout elements");
  if (stride == 0) throw std::invalid_argument("conv2d stride must be positive");
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), K = w.dim(2);
  const std::size_t Ho = conv_output_size(H, K, stride, padding), Wo = conv_output_size(W, K, stride, padding);
  if (Ho == 0 || Wo == 0) throw ShapeError("conv2d input " + to_string(x.shape()) + " smaller than kernel");
  const std::size_t rows = Ci * K * K, plane = Ho * Wo, cols = B * plane;

  // im2col over the whole batch: column (b * plane + p) holds the receptive
  // field of output pixel p of image b.
  auto col = std::make_shared<std::vector<T>>(rows * cols, T(0));
  const auto& xd = x.data();
  for (std::size_t c = 0; c < Ci; ++c) {
    for (std::size_t ki = 0; ki < K; ++ki) {
      for (std::size_t kj = 0; kj < K; ++kj) {
        T* row = col->data() + ((c * K + ki) * K + kj) * cols;
        for (std::size_t b = 0; b < B; ++b) {
          const T* src = xd.data() + (b * Ci + c) * H * W;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            T* dst = row + b * plane + oy * Wo;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(padding);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) dst[ox] = src[iy * static_cast<std::ptrdiff_t>(W) + ix];
            }
          }
        }
      }
    }
  }
  using M = detail::RowMatrix<T>;
  const auto eCo = static_cast<Eigen::Index>(Co), eRows = static_cast<Eigen::Index>(rows),
             eCols = static_cast<Eigen::Index>(cols);
  M prod = Eigen::Map<const M>(w.data().data(), eCo, eRows) * Eigen::Map<const M>(col->data(), eRows, eCols);
  std::vector<T> out(B * Co * plane);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < Co; ++o) {
      const T bv = bias.defined() ? bias.data()[o] : T(0);
      const T* src = prod.data() + o * cols + b * plane;
      T* dst = out.data() + (b * Co + o) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bv;
    }
  }
  detail::check_finite(Primitive::kConv2d, out);
  Tensor<T> y(Shape{B, Co, Ho, Wo}, std::move(out));
  if (tape.wants_grad({&x, &w, &bias})) {
    auto xs = x.storage();
    auto ws = w.storage();
    auto bs = bias.defined() ? bias.storage() : nullptr;
    tape.record(Primitive::kConv2d, {xs, ws, bs}, y,
                [=](const std::vector<T>& g) {
                  M gcat(eCo, eCols);
                  for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t o = 0; o < Co; ++o) {
                      std::copy_n(g.data() + (b * Co + o) * plane, plane, gcat.data() + o * cols + b * plane);
                    }
                  }
                  if (ws->requires_grad) {
                    Eigen::Map<M>(ws->grad.data(), eCo, eRows).noalias() +=
                        gcat * Eigen::Map<const M>(col->data(), eRows, eCols).transpose();
                  }
                  if (bs && bs->requires_grad) {
                    for (std::size_t o = 0; o < Co; ++o) bs->grad[o] += gcat.row(static_cast<Eigen::Index>(o)).sum();
                  }
                  if (xs->requires_grad) {
                    M gcol = Eigen::Map<const M>(ws->data.data(), eCo, eRows).transpose() * gcat;
                    for (std::size_t c = 0; c < Ci; ++c) {
                      for (std::size_t ki = 0; ki < K; ++ki) {
                        for (std::size_t kj = 0; kj < K; ++kj) {
                          const T* row = gcol.data() + ((c * K + ki) * K + kj) * cols;
                          for (std::size_t b = 0; b < B; ++b) {
                            T* dst = xs->grad.data() + (b * Ci + c) * H * W;
                            for (std::size_t oy = 0; oy < Ho; ++oy) {
                              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                                        static_cast<std::ptrdiff_t>(padding);
                              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                              const T* src = row + b * plane + oy * Wo;
                              for (std::size_t ox = 0; ox < Wo; ++ox) {
                                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                                          static_cast<std::ptrdiff_t>(padding);
                                if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) {
                                  dst[iy * static_cast<std::ptrdiff_t>(W) + ix] += src[ox];
                                }
                              }
                            }
                          }
                        }
                      }
                    }
                  }
                });
  }
  return y;
}

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t padding) {
  return conv2d(tape, x, w, Tensor<T>(), stride, padding);
}

// ---------------------------------------------------------------------------
// Generic dispatch by primitive id.

template <typename T>
Tensor<T> apply_primitive(Tape<T>& tape, Primitive op, const std::vector<Tensor<T>>& in, const Attrs& attrs = {}) {
  auto need = [&](std::size_t n) {
    if (in.size() < n) {
      throw ShapeError(std::string(primitive_name(op)) + " needs " + std::to_string(n) + " inputs, got " +
                       std::to_string(in.size()));
    }
  };
  switch (op) {
    case Primitive::kAdd: need(2); return add(tape, in[0], in[1]);
    case Primitive::kSub: need(2); return sub(tape, in[0], in[1]);
    case Primitive::kMul: need(2); return mul(tape, in[0], in[1]);
    case Primitive::kMatMul: need(2); return matmul(tape, in[0], in[1]);
    case Primitive::kConv2d:
      need(2);
      return conv2d(tape, in[0], in[1], in.size() > 2 ? in[2] : Tensor<T>(), attrs.stride, attrs.padding);
    case Primitive::kRelu: need(1); return relu(tape, in[0]);
    case Primitive::kLeakyRelu: need(1); return leaky_relu(tape, in[0], attrs.slope);
    case Primitive::kSigmoid: need(1); return sigmoid(tape, in[0]);
    case Primitive::kSoftmax: need(1); return softmax(tape, in[0], attrs.axis);
    case Primitive::kLogSoftmax: need(1); return log_softmax(tape, in[0], attrs.axis);
    case Primitive::kLog: need(1); return log(tape, in[0]);
    case Primitive::kExp: need(1); return exp(tape, in[0]);
    case Primitive::kExpm1: need(1); return expm1(tape, in[0]);
    case Primitive::kSquare: need(1); return square(tape, in[0]);
    case Primitive::kSoftplus: need(1); return softplus(tape, in[0]);
    case Primitive::kClamp: need(1); return clamp(tape, in[0], attrs.lo, attrs.hi);
    case Primitive::kSum: need(1); return sum(tape, in[0], attrs.axes);
    case Primitive::kMean: need(1); return mean(tape, in[0], attrs.axes);
    case Primitive::kConcat: need(1); return concat(tape, in, attrs.axis);
    case Primitive::kUpsampleNearest: need(1); return upsample_nearest(tape, in[0], attrs.factor);
    case Primitive::kStopGradient: need(1); return stop_gradient(in[0]);
  }
  throw std::invalid_argument("unknown primitive");
}

// ---------------------------------------------------------------------------
// Gradient checking (64-bit).

// Max over coordinates of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|), with
// g_fd from central differences, over every tensor in `leaves`. `loss_fn`
// builds the scalar loss on the given tape from the current leaf values.
template <typename LossFn>
double grad_check_leaves(LossFn&& loss_fn, std::vector<Tensor<double>> leaves, double fd_epsilon,
                         std::size_t max_coords_per_leaf = 0) {
  if (!(fd_epsilon > 0.0)) throw std::invalid_argument("fd_epsilon must be positive");
  std::vector<bool> saved_flags;
  for (auto& leaf : leaves) {
    saved_flags.push_back(leaf.requires_grad());
    leaf.set_requires_grad(true);
    leaf.clear_grad();
  }
  {
    Tape<double> tape;
    Tensor<double> loss = loss_fn(tape);
    if (loss.size() != 1) throw TapeError("grad_check builder returned non-scalar shape " + to_string(loss.shape()));
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape<double> tape(Tape<double>::Mode::kNoGrad);
    return loss_fn(tape).item();
  };
  double worst = 0.0;
  for (std::size_t n = 0; n < leaves.size(); ++n) {
    Tensor<double> leaf = leaves[n];
    const std::vector<double> g_ad = leaf.grad();
    auto& values = leaf.mutable_data();
    const std::size_t n_values = values.size();
    const std::size_t n_checked =
        max_coords_per_leaf == 0 ? n_values : std::min(n_values, max_coords_per_leaf);
    for (std::size_t k = 0; k < n_checked; ++k) {
      const std::size_t i = k * n_values / n_checked;  // evenly strided subset
      const double orig = values[i];
      auto at = [&](double offset) {
        values[i] = orig + offset;
        return eval();
      };
      const double d1 = at(fd_epsilon) - at(-fd_epsilon);
      const double d2 = at(2.0 * fd_epsilon) - at(-2.0 * fd_epsilon);
      values[i] = orig;
      const double g_fd = (8.0 * d1 - d2) / (12.0 * fd_epsilon);
      const double err = std::abs(g_ad[i] - g_fd) / std::max(1e-8, std::abs(g_ad[i]) + std::abs(g_fd));
      worst = std::max(worst, err);
    }
    leaf.clear_grad();
    leaf.set_requires_grad(saved_flags[n]);
  }
  return worst;
}

// Gradient check of a builder mapping one input tensor to a scalar loss.
template <typename Builder>
double grad_check(Builder&& build, const Tensor<double>& input, double fd_epsilon) {
  Tensor<double> x = input.clone();
  return grad_check_leaves([&](Tape<double>& tape) { return build(tape, x); }, {x}, fd_epsilon);
}

// ---------------------------------------------------------------------------
// Counter-based random stream (SplitMix64 evaluated at seed + counter).

class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    std::uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1).
  double next_open() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("next_below(0)");
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // An independent stream derived from this stream's seed.
  RngStream fork(std::uint64_t stream_id) const {
    RngStream mixer(seed_ ^ (0xD1B54A32D192ED03ULL * (stream_id + 1)));
    return RngStream(mixer.next_u64());
  }

  bool operator==(const RngStream&) const = default;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

struct Uniform {
  double a = 0.0;
  double b = 1.0;
};
struct StandardNormal {};
using Distribution = std::variant<Uniform, StandardNormal>;

// Standard normals come from the Box-Muller transform on pairs of draws.
inline void fill_normal(RngStream& rng, std::vector<double>& out) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  for (std::size_t i = 0; i < out.size(); i += 2) {
    const double r = std::sqrt(-2.0 * std::log(rng.next_open()));
    const double angle = kTwoPi * rng.next_double();
    out[i] = r * std::cos(angle);
    if (i + 1 < out.size()) out[i + 1] = r * std::sin(angle);
  }
}

template <typename T>
Tensor<T> rng_fill(RngStream& rng, const Shape& shape, const Distribution& dist) {
  std::vector<double> values(numel(shape));
  if (const auto* u = std::get_if<Uniform>(&dist)) {
    if (u->a > u->b) throw std::invalid_argument("uniform(a, b) needs a <= b");
    for (auto& v : values) v = u->a + (u->b - u->a) * rng.next_double();
  } else {
    fill_normal(rng, values);
  }
  std::vector<T> data(values.begin(), values.end());
  return Tensor<T>(shape, std::move(data));
}

}  // namespace siban
