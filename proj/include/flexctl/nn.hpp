#pragma once

// Parameterized layers. Every layer exposes for_each_param(prefix, f), which
// visits (name, Tensor&) pairs in a fixed order; naming, cloning, freezing and
// checkpointing are all built on that visitor.

#include <cmath>
#include <cstring>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "flexctl/rng.hpp"
#include "flexctl/tensor.hpp"

namespace flexctl {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

template <class T>
Tensor<T> uniform_param(Shape shape, double bound, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> zero_param(Shape shape) {
  const auto n = shape_numel(shape);
  return Tensor<T>::parameter(std::move(shape), std::vector<T>(n, T(0)));
}

template <class T>
struct Linear {
  using scalar_type = T;

  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return {uniform_param<T>({out, in}, bound, rng), uniform_param<T>({out}, bound, rng)};
  }
  static Linear zeros(std::size_t in, std::size_t out) { return {zero_param<T>({out, in}), zero_param<T>({out})}; }

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    f(prefix + "weight", weight);
    f(prefix + "bias", bias);
  }
};

template <class T>
struct Conv2d {
  using scalar_type = T;

  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]
  std::size_t stride = 1;
  std::size_t pad = 0;

  static Conv2d init(std::size_t in, std::size_t out, std::size_t k, Rng& rng, std::size_t stride = 1) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
    return {uniform_param<T>({out, in, k, k}, bound, rng), uniform_param<T>({out}, bound, rng), stride, k / 2};
  }
  static Conv2d zeros(std::size_t in, std::size_t out, std::size_t k) {
    return {zero_param<T>({out, in, k, k}), zero_param<T>({out}), 1, k / 2};
  }

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t kernel() const { return weight.dim(2); }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    f(prefix + "weight", weight);
    f(prefix + "bias", bias);
  }
};

template <class T>
struct GroupNorm {
  using scalar_type = T;

  Tensor<T> gamma;
  Tensor<T> beta;
  std::size_t groups = 1;

  static GroupNorm init(std::size_t channels) {
    const std::size_t g = channels % 4 == 0 ? 4 : 1;
    return {Tensor<T>::parameter({channels}, std::vector<T>(channels, T(1))), zero_param<T>({channels}), g};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return group_norm(x, groups, gamma, beta); }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    f(prefix + "gamma", gamma);
    f(prefix + "beta", beta);
  }
};

// Average over non-overlapping 2x2 windows of [N, C, H, W]. FLOPs are counted
// at input size, like reduce_mean.
template <class T>
Tensor<T> avg_pool2x(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw DimensionError("avg_pool2x expects [N,C,H,W] with even H and W, got " + shape_str(x.shape()));
  }
  // Expressed through reshape + reduce_mean so the gradient rule is shared.
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto r = reshape(x, {n, c, h / 2, 2, w / 2, 2});
  return reduce_mean(r, {3, 5});
}

// Sinusoidal embedding of scalar positions -> [B, dim]. Computed as a
// constant input, so it contributes no FLOPs and no gradient.
template <class T>
Tensor<T> sinusoidal_embedding(const std::vector<double>& positions, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<T> out(positions.size() * dim, T(0));
  for (std::size_t b = 0; b < positions.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      out[b * dim + i] = static_cast<T>(std::cos(positions[b] * freq));
      out[b * dim + half + i] = static_cast<T>(std::sin(positions[b] * freq));
    }
  }
  return Tensor<T>::from_data({positions.size(), dim}, std::move(out));
}

// Collect named parameters of any module with a for_each_param visitor.
template <class M>
auto named_params(M& module, const std::string& prefix = "") {
  using T = typename M::scalar_type;
  ParamList<T> out;
  module.for_each_param(prefix, [&](const std::string& name, Tensor<T>& t) { out.push_back({name, t}); });
  return out;
}

template <class T>
std::vector<Tensor<T>> tensors_of(const ParamList<T>& params) {
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

template <class T>
std::size_t count_params(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

// Bitwise snapshot of parameter values.
template <class T>
std::vector<std::vector<T>> snapshot(const ParamList<T>& params) {
  std::vector<std::vector<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

template <class T>
bool snapshots_equal(const std::vector<std::vector<T>>& a, const std::vector<std::vector<T>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return false;
    if (std::memcmp(a[i].data(), b[i].data(), a[i].size() * sizeof(T)) != 0) return false;
  }
  return true;
}

}  // namespace flexctl
