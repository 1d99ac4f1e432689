#pragma once

// Dense tensors with a define-by-run gradient tape.
//
// A Tensor is a handle to an immutable node. Operations record themselves on
// the thread's active GradTape when at least one operand requires a gradient;
// with no tape installed nothing is recorded, which is how inference runs.
// Dense products are evaluated with Eigen; everything else is plain loops.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/StdVector>

#include "flexctl/errors.hpp"

namespace flexctl {

// Tensor storage. A fixed 64-byte alignment keeps Eigen on the same
// vectorization path for every allocation, so results do not depend on
// where the heap places a buffer.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Floating-point operations executed by forward primitives on this thread.
// Multiply-accumulate counts as 2; pointwise and normalization ops count one
// per output element; pure data movement counts zero.
class FlopCounter {
 public:
  FlopCounter() : start_(total()) {}
  std::uint64_t count() const { return total() - start_; }
  void reset() { start_ = total(); }

  static void add(std::uint64_t n) { total() += n; }
  static std::uint64_t& total() {
    thread_local std::uint64_t value = 0;
    return value;
  }

 private:
  std::uint64_t start_;
};

template <class T>
class GradTape;

namespace detail {

template <class T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Gradient buffer of input i, or nullptr when that input takes no gradient.
  T* input_grad(std::size_t i) {
    auto& in = *inputs[i];
    if (!in.requires_grad) return nullptr;
    if (in.grad.size() != in.value.size()) in.grad.assign(in.value.size(), T(0));
    return in.grad.data();
  }
  const Buffer<T>& input_value(std::size_t i) const { return inputs[i]->value; }
};

template <class T>
void check_finite(const Buffer<T>& v, const char* op) {
  for (const T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from_data(Shape shape, const std::vector<T>& data) {
    return from_buffer(std::move(shape), Buffer<T>(data.begin(), data.end()));
  }
  static Tensor from_data(Shape shape, std::initializer_list<T> data) {
    return from_buffer(std::move(shape), Buffer<T>(data));
  }
  static Tensor from_buffer(Shape shape, Buffer<T> data) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("data size " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(shape));
    }
    for (auto d : shape) {
      if (d == 0) throw DimensionError("zero-sized dimension in " + shape_str(shape));
    }
    detail::check_finite(data, "from_data");
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T v) {
    const auto n = shape_numel(shape);
    return from_buffer(std::move(shape), Buffer<T>(n, v));
  }
  static Tensor scalar(T v) { return from_data({}, {v}); }
  static Tensor parameter(Shape shape, const std::vector<T>& data) {
    Tensor t = from_data(std::move(shape), data);
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const T> data() const { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->leaf) throw UsageError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = on;
  }

  // In-place access for optimizers and loaders. Only leaves may be mutated.
  std::span<T> mutable_data() {
    if (!node_->leaf) throw UsageError("mutable_data() on a non-leaf tensor");
    return node_->value;
  }

  // Deep copy as a fresh leaf with the same requires_grad flag.
  Tensor clone() const {
    Tensor t = from_buffer(shape(), node_->value);
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }
  // Same values, no gradient history.
  Tensor detach() const { return from_buffer(shape(), node_->value); }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>::from_buffer(shape(), Buffer<U>(node_->value.begin(), node_->value.end()));
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// Ordered record of primitive applications. Installing a tape makes it the
// thread's recording target until it is destroyed.
template <class T>
class GradTape {
 public:
  GradTape() : previous_(current_ref()) { current_ref() = this; }
  ~GradTape() { current_ref() = previous_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* current() { return current_ref(); }

  void record(std::shared_ptr<detail::Node<T>> n) { nodes_.push_back(std::move(n)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Reverse-mode sweep from a scalar loss. Each recorded primitive is visited
  // exactly once, in reverse recording order. Parameters the loss does not
  // depend on receive zero gradients. The tape is cleared afterwards.
  std::vector<Tensor<T>> gradient(const Tensor<T>& loss, std::initializer_list<Tensor<T>> params) {
    return gradient(loss, std::span<const Tensor<T>>(params.begin(), params.size()));
  }
  std::vector<Tensor<T>> gradient(const Tensor<T>& loss, std::span<const Tensor<T>> params) {
    if (loss.numel() != 1) {
      throw UsageError("gradient() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    for (auto& n : nodes_) {
      n->grad.assign(n->value.size(), T(0));
      for (auto& in : n->inputs) {
        if (in->requires_grad) in->grad.assign(in->value.size(), T(0));
      }
    }
    for (const auto& p : params) {
      if (p.requires_grad()) p.node()->grad.assign(p.numel(), T(0));
    }
    std::vector<Tensor<T>> out;
    if (loss.requires_grad()) {
      loss.node()->grad.assign(1, T(1));
      for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        auto& n = **it;
        if (n.backward) n.backward(n);
      }
    }
    out.reserve(params.size());
    for (const auto& p : params) {
      const auto& g = p.node()->grad;
      if (p.requires_grad() && g.size() == p.numel()) {
        out.push_back(Tensor<T>::from_buffer(p.shape(), g));
      } else {
        out.push_back(Tensor<T>::zeros(p.shape()));
      }
    }
    for (auto& n : nodes_) {
      for (auto& in : n->inputs) in->grad.clear();
      n->grad.clear();
    }
    nodes_.clear();
    return out;
  }

 private:
  static GradTape*& current_ref() {
    thread_local GradTape* tape = nullptr;
    return tape;
  }

  GradTape* previous_;
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
};

// Gradients of a scalar loss with respect to params, using the active tape.
template <class T>
std::vector<Tensor<T>> grad(const Tensor<T>& loss, std::span<const Tensor<T>> params) {
  auto* tape = GradTape<T>::current();
  if (!tape) throw UsageError("grad() called without an active GradTape");
  return tape->gradient(loss, params);
}
template <class T>
std::vector<Tensor<T>> grad(const Tensor<T>& loss, const std::vector<Tensor<T>>& params) {
  return grad(loss, std::span<const Tensor<T>>(params));
}

namespace detail {

template <class T>
Tensor<T> make_result(Shape shape, Buffer<T> value, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward, const char* op) {
  check_finite(value, op);
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->leaf = false;
  auto* tape = GradTape<T>::current();
  const bool needs =
      tape && std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& t : inputs) n->inputs.push_back(t.node());
    n->backward = std::move(backward);
    tape->record(n);
  }
  return Tensor<T>(std::move(n));
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Trailing-dimension broadcast of two shapes. Strides are expressed in the
// output's rank, with 0 on broadcast axes.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;

  Broadcast(const Shape& a, const Shape& b) {
    same = (a == b);
    const std::size_t r = std::max(a.size(), b.size());
    out.assign(r, 1);
    stride_a.assign(r, 0);
    stride_b.assign(r, 0);
    const auto sa = strides_of(a);
    const auto sb = strides_of(b);
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t da = i + a.size() >= r ? a[i + a.size() - r] : 1;
      const std::size_t db = i + b.size() >= r ? b[i + b.size() - r] : 1;
      if (da != db && da != 1 && db != 1) {
        throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
      }
      out[i] = std::max(da, db);
      if (i + a.size() >= r && da != 1) stride_a[i] = sa[i + a.size() - r];
      if (i + b.size() >= r && db != 1) stride_b[i] = sb[i + b.size() - r];
    }
  }

  // f(out_index, a_index, b_index) for every output element, in order.
  template <class F>
  void for_each(F&& f) const {
    const std::size_t n = shape_numel(out);
    if (same) {
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      return;
    }
    const std::size_t r = out.size();
    if (r == 0) {
      f(0, 0, 0);
      return;
    }
    const std::size_t inner = out[r - 1];
    const std::size_t ia = stride_a[r - 1], ib = stride_b[r - 1];
    std::vector<std::size_t> idx(r, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t base = 0; base < n; base += inner) {
      for (std::size_t j = 0; j < inner; ++j) f(base + j, oa + j * ia, ob + j * ib);
      for (std::size_t d = r - 1; d-- > 0;) {
        ++idx[d];
        oa += stride_a[d];
        ob += stride_b[d];
        if (idx[d] < out[d]) break;
        oa -= stride_a[d] * out[d];
        ob -= stride_b[d] * out[d];
        idx[d] = 0;
      }
    }
  }
};

template <class T>
T stable_sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pointwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const detail::Broadcast bc(a.shape(), b.shape());
  Buffer<T> out(shape_numel(bc.out));
  const auto& va = a.node()->value;
  const auto& vb = b.node()->value;
  bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = va[ia] + vb[ib]; });
  FlopCounter::add(out.size());
  return detail::make_result<T>(bc.out, std::move(out), {a, b}, [bc](detail::Node<T>& n) {
    T* ga = n.input_grad(0);
    T* gb = n.input_grad(1);
    const auto& g = n.grad;
    bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += g[i];
      if (gb) gb[ib] += g[i];
    });
  }, "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const detail::Broadcast bc(a.shape(), b.shape());
  Buffer<T> out(shape_numel(bc.out));
  const auto& va = a.node()->value;
  const auto& vb = b.node()->value;
  bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = va[ia] - vb[ib]; });
  FlopCounter::add(out.size());
  return detail::make_result<T>(bc.out, std::move(out), {a, b}, [bc](detail::Node<T>& n) {
    T* ga = n.input_grad(0);
    T* gb = n.input_grad(1);
    const auto& g = n.grad;
    bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += g[i];
      if (gb) gb[ib] -= g[i];
    });
  }, "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const detail::Broadcast bc(a.shape(), b.shape());
  Buffer<T> out(shape_numel(bc.out));
  const auto& va = a.node()->value;
  const auto& vb = b.node()->value;
  bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = va[ia] * vb[ib]; });
  FlopCounter::add(out.size());
  return detail::make_result<T>(bc.out, std::move(out), {a, b}, [bc](detail::Node<T>& n) {
    T* ga = n.input_grad(0);
    T* gb = n.input_grad(1);
    const auto& va = n.input_value(0);
    const auto& vb = n.input_value(1);
    const auto& g = n.grad;
    bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += g[i] * vb[ib];
      if (gb) gb[ib] += g[i] * va[ia];
    });
  }, "mul");
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Buffer<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  FlopCounter::add(out.size());
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [s](detail::Node<T>& n) {
    if (T* ga = n.input_grad(0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += s * n.grad[i];
    }
  }, "scale");
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Buffer<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += s;
  FlopCounter::add(out.size());
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [](detail::Node<T>& n) {
    if (T* ga = n.input_grad(0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    }
  }, "add_scalar");
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Buffer<T> out(a.numel());
  const auto& v = a.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::stable_sigmoid(v[i]);
  FlopCounter::add(out.size());
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [](detail::Node<T>& n) {
    if (T* ga = n.input_grad(0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        const T y = n.value[i];
        ga[i] += n.grad[i] * y * (T(1) - y);
      }
    }
  }, "sigmoid");
}

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
  Buffer<T> out(a.numel());
  const auto& v = a.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * detail::stable_sigmoid(v[i]);
  FlopCounter::add(out.size());
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [](detail::Node<T>& n) {
    if (T* ga = n.input_grad(0)) {
      const auto& x = n.input_value(0);
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        const T s = detail::stable_sigmoid(x[i]);
        ga[i] += n.grad[i] * (s * (T(1) + x[i] * (T(1) - s)));
      }
    }
  }, "silu");
}

// Forward value is `hard`; the backward pass treats the op as the identity
// on `soft`.
template <class T>
Tensor<T> straight_through(const Tensor<T>& soft, const Tensor<T>& hard) {
  if (soft.shape() != hard.shape()) {
    throw DimensionError("straight_through: " + shape_str(soft.shape()) + " vs " + shape_str(hard.shape()));
  }
  Buffer<T> out(hard.data().begin(), hard.data().end());
  return detail::make_result<T>(hard.shape(), std::move(out), {soft}, [](detail::Node<T>& n) {
    if (T* gs = n.input_grad(0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) gs[i] += n.grad[i];
    }
  }, "straight_through");
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (const T v : a.data()) s += v;
  FlopCounter::add(a.numel());
  return detail::make_result<T>({}, {s}, {a}, [](detail::Node<T>& n) {
    if (T* ga = n.input_grad(0)) {
      const std::size_t m = n.input_value(0).size();
      for (std::size_t i = 0; i < m; ++i) ga[i] += n.grad[0];
    }
  }, "sum");
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Arithmetic mean over `dims`; those axes are removed from the shape.
template <class T>
Tensor<T> reduce_mean(const Tensor<T>& a, std::vector<std::size_t> dims) {
  if (dims.empty()) throw DimensionError("reduce_mean: empty reduction set");
  std::sort(dims.begin(), dims.end());
  if (std::adjacent_find(dims.begin(), dims.end()) != dims.end()) {
    throw DimensionError("reduce_mean: repeated dimension");
  }
  const Shape& in = a.shape();
  if (dims.back() >= in.size()) {
    throw DimensionError("reduce_mean: dimension " + std::to_string(dims.back()) + " out of range for " +
                         shape_str(in));
  }
  std::vector<bool> reduced(in.size(), false);
  for (auto d : dims) reduced[d] = true;
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (reduced[i]) {
      count *= in[i];
    } else {
      out_shape.push_back(in[i]);
    }
  }
  if (count == 0) throw DimensionError("reduce_mean: empty reduction extent");
  // Output stride of each input axis (0 on reduced axes).
  const auto out_strides = detail::strides_of(out_shape);
  std::vector<std::size_t> map_stride(in.size(), 0);
  for (std::size_t i = 0, j = 0; i < in.size(); ++i) {
    if (!reduced[i]) map_stride[i] = out_strides[j++];
  }
  auto for_each_in = [in, map_stride](auto&& f) {
    const std::size_t n = shape_numel(in);
    std::vector<std::size_t> idx(in.size(), 0);
    std::size_t o = 0;
    for (std::size_t i = 0; i < n; ++i) {
      f(i, o);
      for (std::size_t d = in.size(); d-- > 0;) {
        ++idx[d];
        o += map_stride[d];
        if (idx[d] < in[d]) break;
        o -= map_stride[d] * in[d];
        idx[d] = 0;
      }
    }
  };
  Buffer<T> out(shape_numel(out_shape), T(0));
  const auto& v = a.node()->value;
  for_each_in([&](std::size_t i, std::size_t o) { out[o] += v[i]; });
  const T inv = T(1) / static_cast<T>(count);
  for (auto& x : out) x *= inv;
  FlopCounter::add(a.numel());
  return detail::make_result<T>(out_shape, std::move(out), {a}, [for_each_in, inv](detail::Node<T>& n) {
    if (T* ga = n.input_grad(0)) {
      for_each_in([&](std::size_t i, std::size_t o) { ga[i] += n.grad[o] * inv; });
    }
  }, "reduce_mean");
}

// Mean squared error over all elements.
template <class T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  const auto& p = pred.node()->value;
  const auto& t = target.node()->value;
  T s = T(0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T d = p[i] - t[i];
    s += d * d;
  }
  const T inv = T(1) / static_cast<T>(p.size());
  FlopCounter::add(3 * p.size());
  return detail::make_result<T>({}, {s * inv}, {pred, target}, [inv](detail::Node<T>& n) {
    const auto& p = n.input_value(0);
    const auto& t = n.input_value(1);
    T* gp = n.input_grad(0);
    T* gt = n.input_grad(1);
    const T g = n.grad[0] * T(2) * inv;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T d = g * (p[i] - t[i]);
      if (gp) gp[i] += d;
      if (gt) gt[i] -= d;
    }
  }, "mse");
}

// ---------------------------------------------------------------------------
// Shape manipulation (zero FLOPs)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Buffer<T> out(a.data().begin(), a.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {a}, [](detail::Node<T>& n) {
    if (T* ga = n.input_grad(0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    }
  }, "reshape");
}

template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const Shape& in = a.shape();
  if (perm.size() != in.size()) throw DimensionError("permute: rank mismatch");
  std::vector<bool> seen(in.size(), false);
  for (auto p : perm) {
    if (p >= in.size() || seen[p]) throw DimensionError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(in.size());
  const auto in_strides = detail::strides_of(in);
  std::vector<std::size_t> src_stride(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out_shape[i] = in[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  // src[i] = input offset of output element i
  const std::size_t n = a.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  {
    std::vector<std::size_t> idx(in.size(), 0);
    std::size_t o = 0;
    for (std::size_t i = 0; i < n; ++i) {
      (*src)[i] = o;
      for (std::size_t d = in.size(); d-- > 0;) {
        ++idx[d];
        o += src_stride[d];
        if (idx[d] < out_shape[d]) break;
        o -= src_stride[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  Buffer<T> out(n);
  const auto& v = a.node()->value;
  for (std::size_t i = 0; i < n; ++i) out[i] = v[(*src)[i]];
  return detail::make_result<T>(out_shape, std::move(out), {a}, [src](detail::Node<T>& nd) {
    if (T* ga = nd.input_grad(0)) {
      for (std::size_t i = 0; i < nd.grad.size(); ++i) ga[(*src)[i]] += nd.grad[i];
    }
  }, "permute");
}

// Sub-range [start, start+length) along one axis.
template <class T>
Tensor<T> narrow(const Tensor<T>& a, std::size_t dim, std::size_t start, std::size_t length) {
  const Shape& in = a.shape();
  if (dim >= in.size() || length == 0 || start + length > in[dim]) {
    throw DimensionError("narrow: range out of bounds for " + shape_str(in));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < dim; ++i) outer *= in[i];
  for (std::size_t i = dim + 1; i < in.size(); ++i) inner *= in[i];
  Shape out_shape = in;
  out_shape[dim] = length;
  Buffer<T> out(outer * length * inner);
  const auto& v = a.node()->value;
  const std::size_t extent = in[dim];
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(v.begin() + (o * extent + start) * inner, length * inner, out.begin() + o * length * inner);
  }
  return detail::make_result<T>(out_shape, std::move(out), {a},
                                [outer, inner, extent, start, length](detail::Node<T>& n) {
    if (T* ga = n.input_grad(0)) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < length * inner; ++j) {
          ga[(o * extent + start) * inner + j] += n.grad[o * length * inner + j];
        }
      }
    }
  }, "narrow");
}

// Rows of `table` [V x E] selected by ids -> [ids.size() x E].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  Buffer<T> out(ids.size() * width);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw UsageError("embedding: id " + std::to_string(ids[r]) + " out of range");
    }
    std::copy_n(table.data().begin() + ids[r] * width, width, out.begin() + r * width);
  }
  return detail::make_result<T>({ids.size(), width}, std::move(out), {table}, [ids, width](detail::Node<T>& n) {
    if (T* gt = n.input_grad(0)) {
      for (std::size_t r = 0; r < ids.size(); ++r) {
        for (std::size_t j = 0; j < width; ++j) gt[ids[r] * width + j] += n.grad[r * width + j];
      }
    }
  }, "embedding");
}

// Concatenation along axis 0.
template <class T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw UsageError("concat0: no inputs");
  Shape shape = parts[0].shape();
  if (shape.empty()) throw DimensionError("concat0: scalar input");
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat0: trailing shapes differ");
    }
    rows += p.dim(0);
  }
  shape[0] = rows;
  Buffer<T> out;
  out.reserve(shape_numel(shape));
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    sizes.push_back(p.numel());
  }
  return detail::make_result<T>(shape, std::move(out), parts, [sizes](detail::Node<T>& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (T* g = n.input_grad(k)) {
        for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += n.grad[off + i];
      }
      off += sizes[k];
    }
  }, "concat0");
}

// Nearest-neighbour 2x upsampling of [N, C, H, W].
template <class T>
Tensor<T> upsample2x(const Tensor<T>& a) {
  if (a.rank() != 4) throw DimensionError("upsample2x expects [N,C,H,W]");
  const std::size_t planes = a.dim(0) * a.dim(1), h = a.dim(2), w = a.dim(3);
  Buffer<T> out(planes * 4 * h * w);
  const auto& v = a.node()->value;
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t x = 0; x < 2 * w; ++x) {
        out[(p * 2 * h + y) * 2 * w + x] = v[(p * h + y / 2) * w + x / 2];
      }
    }
  }
  return detail::make_result<T>({a.dim(0), a.dim(1), 2 * h, 2 * w}, std::move(out), {a},
                                [planes, h, w](detail::Node<T>& n) {
    if (T* ga = n.input_grad(0)) {
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t y = 0; y < 2 * h; ++y) {
          for (std::size_t x = 0; x < 2 * w; ++x) {
            ga[(p * h + y / 2) * w + x / 2] += n.grad[(p * 2 * h + y) * 2 * w + x];
          }
        }
      }
    }
  }, "upsample2x");
}

// ---------------------------------------------------------------------------
// Dense products
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<T> out(m * n);
  detail::Map<T>(out.data(), m, n).noalias() =
      detail::MapC<T>(a.data().data(), m, k) * detail::MapC<T>(b.data().data(), k, n);
  FlopCounter::add(2 * m * k * n);
  return detail::make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& nd) {
    detail::MapC<T> g(nd.grad.data(), m, n);
    if (T* ga = nd.input_grad(0)) {
      detail::Map<T>(ga, m, k).noalias() += g * detail::MapC<T>(nd.input_value(1).data(), k, n).transpose();
    }
    if (T* gb = nd.input_grad(1)) {
      detail::Map<T>(gb, k, n).noalias() += detail::MapC<T>(nd.input_value(0).data(), m, k).transpose() * g;
    }
  }, "matmul");
}

// Batched product of [B, M, K] and [B, K, N], with optional transposition of
// either operand's trailing two axes.
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw DimensionError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0);
  const std::size_t ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const std::size_t k2 = trans_b ? bc : br, n = trans_b ? br : bc;
  if (k != k2) throw DimensionError("bmm: inner dimensions " + std::to_string(k) + " vs " + std::to_string(k2));
  Buffer<T> out(batch * m * n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    detail::MapC<T> A(pa + i * ar * ac, ar, ac);
    detail::MapC<T> B(pb + i * br * bc, br, bc);
    detail::Map<T> C(out.data() + i * m * n, m, n);
    if (!trans_a && !trans_b) C.noalias() = A * B;
    else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
    else C.noalias() = A.transpose() * B.transpose();
  }
  FlopCounter::add(2 * batch * m * k * n);
  return detail::make_result<T>({batch, m, n}, std::move(out), {a, b},
                                [=](detail::Node<T>& nd) {
    T* ga = nd.input_grad(0);
    T* gb = nd.input_grad(1);
    const T* va = nd.input_value(0).data();
    const T* vb = nd.input_value(1).data();
    for (std::size_t i = 0; i < batch; ++i) {
      detail::MapC<T> G(nd.grad.data() + i * m * n, m, n);
      detail::MapC<T> A(va + i * ar * ac, ar, ac);
      detail::MapC<T> B(vb + i * br * bc, br, bc);
      // op(A) = trans_a ? A^T : A, similarly for B; C = op(A) op(B).
      if (ga) {
        detail::Map<T> GA(ga + i * ar * ac, ar, ac);
        if (!trans_a) {
          if (!trans_b) GA.noalias() += G * B.transpose();
          else GA.noalias() += G * B;
        } else {
          if (!trans_b) GA.noalias() += B * G.transpose();
          else GA.noalias() += B.transpose() * G.transpose();
        }
      }
      if (gb) {
        detail::Map<T> GB(gb + i * br * bc, br, bc);
        if (!trans_b) {
          if (!trans_a) GB.noalias() += A.transpose() * G;
          else GB.noalias() += A * G;
        } else {
          if (!trans_a) GB.noalias() += G.transpose() * A;
          else GB.noalias() += G.transpose() * A.transpose();
        }
      }
    }
  }, "bmm");
}

// y = x W^T + b over the last axis. x: [..., in], weight: [out, in], bias: [out] or undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() < 1 || weight.rank() != 2 || x.shape().back() != weight.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()));
  }
  const std::size_t in = weight.dim(1), out_f = weight.dim(0);
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Buffer<T> out(rows * out_f);
  detail::Map<T> Y(out.data(), rows, out_f);
  Y.noalias() = detail::MapC<T>(x.data().data(), rows, in) * detail::MapC<T>(weight.data().data(), out_f, in).transpose();
  if (has_bias) {
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), out_f);
  }
  FlopCounter::add(2 * rows * in * out_f);
  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result<T>(out_shape, std::move(out), inputs, [rows, in, out_f, has_bias](detail::Node<T>& n) {
    detail::MapC<T> G(n.grad.data(), rows, out_f);
    if (T* gx = n.input_grad(0)) {
      detail::Map<T>(gx, rows, in).noalias() += G * detail::MapC<T>(n.input_value(1).data(), out_f, in);
    }
    if (T* gw = n.input_grad(1)) {
      detail::Map<T>(gw, out_f, in).noalias() += G.transpose() * detail::MapC<T>(n.input_value(0).data(), rows, in);
    }
    if (has_bias) {
      if (T* gb = n.input_grad(2)) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb, out_f) += G.colwise().sum();
      }
    }
  }, "linear");
}

// Cross-correlation with zero padding. x: [C_in, H, W] or [N, C_in, H, W];
// weight: [C_out, C_in, k, k] with odd k; bias: [C_out] or undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
  const bool batched = x.rank() == 4;
  if (!(x.rank() == 3 || batched) || weight.rank() != 4) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
  }
  const std::size_t n_batch = batched ? x.dim(0) : 1;
  const std::size_t cin = x.dim(batched ? 1 : 0), h = x.dim(batched ? 2 : 1), w = x.dim(batched ? 3 : 2);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin || weight.dim(3) != k) {
    throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " for input channels " + std::to_string(cin));
  }
  if (k % 2 == 0) throw DimensionError("conv2d: kernel size must be odd");
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  if (h + 2 * pad < k || w + 2 * pad < k || (h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0) {
    throw DimensionError("conv2d: non-integral output size for input " + shape_str(x.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != cout)) throw DimensionError("conv2d: bias shape");
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  const std::size_t kk = cin * k * k, plane = ho * wo;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);

  // Column buffers are kept for the weight gradient.
  auto cols = std::make_shared<Buffer<T>>(pointwise ? 0 : n_batch * kk * plane);
  const T* xv = x.data().data();
  auto im2col = [=](const T* src, T* col) {
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t ki = 0; ki < k; ++ki) {
        for (std::size_t kj = 0; kj < k; ++kj) {
          T* row = col + ((c * k + ki) * k + kj) * plane;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
              std::fill_n(row + oy * wo, wo, T(0));
              continue;
            }
            const T* srow = src + (c * h + iy) * w;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
              row[oy * wo + ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? T(0) : srow[ix];
            }
          }
        }
      }
    }
  };
  Buffer<T> out(n_batch * cout * plane);
  detail::MapC<T> W(weight.data().data(), cout, kk);
  for (std::size_t b = 0; b < n_batch; ++b) {
    const T* col = xv + b * cin * h * w;
    if (!pointwise) {
      im2col(xv + b * cin * h * w, cols->data() + b * kk * plane);
      col = cols->data() + b * kk * plane;
    }
    detail::Map<T> Y(out.data() + b * cout * plane, cout, plane);
    Y.noalias() = W * detail::MapC<T>(col, kk, plane);
    if (has_bias) {
      Y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.data().data(), cout);
    }
  }
  FlopCounter::add(2 * n_batch * cout * kk * plane);
  Shape out_shape = batched ? Shape{n_batch, cout, ho, wo} : Shape{cout, ho, wo};
  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result<T>(out_shape, std::move(out), inputs, [=](detail::Node<T>& n) {
    T* gx = n.input_grad(0);
    T* gw = n.input_grad(1);
    T* gb = has_bias ? n.input_grad(2) : nullptr;
    const T* xin = n.input_value(0).data();
    detail::MapC<T> Wm(n.input_value(1).data(), cout, kk);
    Buffer<T> dcol(pointwise ? 0 : kk * plane);
    for (std::size_t b = 0; b < n_batch; ++b) {
      detail::MapC<T> G(n.grad.data() + b * cout * plane, cout, plane);
      const T* col = pointwise ? xin + b * cin * h * w : cols->data() + b * kk * plane;
      if (gw) detail::Map<T>(gw, cout, kk).noalias() += G * detail::MapC<T>(col, kk, plane).transpose();
      if (gb) Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb, cout) += G.rowwise().sum();
      if (gx) {
        if (pointwise) {
          detail::Map<T>(gx + b * cin * h * w, kk, plane).noalias() += Wm.transpose() * G;
          continue;
        }
        detail::Map<T>(dcol.data(), kk, plane).noalias() = Wm.transpose() * G;
        T* dst = gx + b * cin * h * w;
        for (std::size_t c = 0; c < cin; ++c) {
          for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
              const T* row = dcol.data() + ((c * k + ki) * k + kj) * plane;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                T* drow = dst + (c * h + iy) * w;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
                  if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) drow[ix] += row[oy * wo + ox];
                }
              }
            }
          }
        }
      }
    }
  }, "conv2d");
}

// ---------------------------------------------------------------------------
// Fused composites
// ---------------------------------------------------------------------------

// Softmax over the last axis, max-subtracted.
template <class T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.rank() < 1) throw DimensionError("softmax on scalar");
  const std::size_t inner = a.shape().back(), rows = a.numel() / inner;
  Buffer<T> out(a.numel());
  const auto& v = a.node()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = v.data() + r * inner;
    T* dst = out.data() + r * inner;
    const T mx = *std::max_element(src, src + inner);
    T s = T(0);
    for (std::size_t j = 0; j < inner; ++j) {
      dst[j] = std::exp(src[j] - mx);
      s += dst[j];
    }
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < inner; ++j) dst[j] *= inv;
  }
  FlopCounter::add(a.numel());
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [rows, inner](detail::Node<T>& n) {
    if (T* ga = n.input_grad(0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = n.value.data() + r * inner;
        const T* g = n.grad.data() + r * inner;
        T dot = T(0);
        for (std::size_t j = 0; j < inner; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < inner; ++j) ga[r * inner + j] += y[j] * (g[j] - dot);
      }
    }
  }, "softmax");
}

namespace detail {

// Normalizes `groups` contiguous segments of length m each; returns x_hat and
// per-segment reciprocal standard deviation.
template <class T>
void normalize_segments(const T* x, std::size_t groups, std::size_t m, T eps, T* xhat, T* rstd) {
  for (std::size_t g = 0; g < groups; ++g) {
    const T* s = x + g * m;
    T mu = T(0);
    for (std::size_t i = 0; i < m; ++i) mu += s[i];
    mu /= static_cast<T>(m);
    T var = T(0);
    for (std::size_t i = 0; i < m; ++i) var += (s[i] - mu) * (s[i] - mu);
    var /= static_cast<T>(m);
    const T r = T(1) / std::sqrt(var + eps);
    rstd[g] = r;
    for (std::size_t i = 0; i < m; ++i) xhat[g * m + i] = (s[i] - mu) * r;
  }
}

// dx for y = x_hat (no affine) given dy, per segment.
template <class T>
void normalize_segments_backward(const T* xhat, const T* rstd, const T* dy, std::size_t groups, std::size_t m,
                                 T* dx) {
  for (std::size_t g = 0; g < groups; ++g) {
    const T* xh = xhat + g * m;
    const T* d = dy + g * m;
    T mean_d = T(0), mean_dx = T(0);
    for (std::size_t i = 0; i < m; ++i) {
      mean_d += d[i];
      mean_dx += d[i] * xh[i];
    }
    mean_d /= static_cast<T>(m);
    mean_dx /= static_cast<T>(m);
    for (std::size_t i = 0; i < m; ++i) dx[g * m + i] += rstd[g] * (d[i] - mean_d - xh[i] * mean_dx);
  }
}

}  // namespace detail

// Group normalization of [N, C, H, W] with per-channel affine gamma/beta [C].
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  if (x.rank() != 4) throw DimensionError("group_norm expects [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t nb = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups == 0 || c % groups != 0) throw DimensionError("group_norm: channels not divisible by groups");
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) throw DimensionError("group_norm: affine shape");
  const std::size_t segs = nb * groups, m = (c / groups) * hw;
  auto xhat = std::make_shared<Buffer<T>>(x.numel());
  auto rstd = std::make_shared<Buffer<T>>(segs);
  detail::normalize_segments(x.data().data(), segs, m, eps, xhat->data(), rstd->data());
  Buffer<T> out(x.numel());
  const T* gm = gamma.data().data();
  const T* bt = beta.data().data();
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) out[off + i] = (*xhat)[off + i] * gm[ch] + bt[ch];
    }
  }
  FlopCounter::add(x.numel());
  return detail::make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                                [=](detail::Node<T>& n) {
    T* gx = n.input_grad(0);
    T* gg = n.input_grad(1);
    T* gbt = n.input_grad(2);
    const T* gmv = n.input_value(1).data();
    Buffer<T> dxhat(gx ? n.grad.size() : 0);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t off = (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T g = n.grad[off + i];
          if (gg) gg[ch] += g * (*xhat)[off + i];
          if (gbt) gbt[ch] += g;
          if (gx) dxhat[off + i] = g * gmv[ch];
        }
      }
    }
    if (gx) detail::normalize_segments_backward(xhat->data(), rstd->data(), dxhat.data(), segs, m, gx);
  }, "group_norm");
}

// Layer normalization over the last axis, without affine parameters.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps = T(1e-6)) {
  if (x.rank() < 1) throw DimensionError("layer_norm on scalar");
  const std::size_t m = x.shape().back(), segs = x.numel() / m;
  auto rstd = std::make_shared<Buffer<T>>(segs);
  Buffer<T> out(x.numel());
  detail::normalize_segments(x.data().data(), segs, m, eps, out.data(), rstd->data());
  FlopCounter::add(x.numel());
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [=](detail::Node<T>& n) {
    if (T* gx = n.input_grad(0)) {
      detail::normalize_segments_backward(n.value.data(), rstd->data(), n.grad.data(), segs, m, gx);
    }
  }, "layer_norm");
}

}  // namespace flexctl
