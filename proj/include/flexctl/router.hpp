#pragma once

// Per-block router units. A router maps the feature entering its block to a
// scalar score k; inference thresholds sigmoid(k), training relaxes the
// decision with Gumbel-Sigmoid noise and a straight-through hard mask.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <span>
#include <vector>

#include "flexctl/errors.hpp"
#include "flexctl/nn.hpp"
#include "flexctl/rng.hpp"
#include "flexctl/tensor.hpp"

namespace flexctl {

struct GumbelParams {
  double temperature = 5.0;      // TP
  double threshold = 0.5;        // T, applied to sigmoid(k) at inference
  double train_threshold = 0.5;  // tau, applied to the relaxed mask during training

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("gumbel temperature must be > 0");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
    if (!(train_threshold > 0.0 && train_threshold < 1.0)) throw ConfigError("train threshold must lie in (0, 1)");
  }
};

struct RouterDecision {
  double k = 0.0;
  double k_prime = 0.0;
  double soft = 0.0;  // only meaningful when has_soft
  int hard = 0;
  bool has_soft = false;
};

inline double sigmoid_scalar(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// k' exactly at the threshold maps to 0.
inline int threshold_mask(double k_prime, double threshold) { return k_prime > threshold ? 1 : 0; }

inline constexpr double kGumbelClamp = 1e-12;

inline double gumbel_from_uniform(double u) {
  u = std::clamp(u, kGumbelClamp, 1.0 - kGumbelClamp);
  return -std::log(-std::log(u));
}

inline double gumbel_sigmoid(double k, double tp, double u1, double u2) {
  if (!(tp > 0.0)) throw ConfigError("gumbel temperature must be > 0");
  return sigmoid_scalar((k + gumbel_from_uniform(u1) - gumbel_from_uniform(u2)) / tp);
}

// Differentiable relaxation over a batch of scores: k [B], noise[b] = G1 - G2.
template <class T>
Tensor<T> gumbel_sigmoid(const Tensor<T>& k, double tp, const std::vector<double>& noise) {
  if (!(tp > 0.0)) throw ConfigError("gumbel temperature must be > 0");
  if (k.rank() != 1 || k.dim(0) != noise.size()) throw DimensionError("gumbel_sigmoid: one noise value per score");
  std::vector<T> g(noise.begin(), noise.end());
  auto shifted = add(k, Tensor<T>::from_data(k.shape(), std::move(g)));
  return sigmoid(scale(shifted, static_cast<T>(1.0 / tp)));
}

// G1 - G2 for one decision.
inline double draw_gumbel_difference(Rng& rng) {
  const double u1 = rng.uniform();
  const double u2 = rng.uniform();
  return gumbel_from_uniform(u1) - gumbel_from_uniform(u2);
}

inline std::vector<RouterDecision> infer_decisions(std::span<const double> k, const GumbelParams& g) {
  std::vector<RouterDecision> out;
  out.reserve(k.size());
  for (double v : k) {
    RouterDecision d;
    d.k = v;
    d.k_prime = sigmoid_scalar(v);
    d.hard = threshold_mask(d.k_prime, g.threshold);
    out.push_back(d);
  }
  return out;
}

constexpr double kRouterBiasInit = 1.0;

// GAP over space, then C -> hidden -> 1 with SiLU.
template <class T>
struct RouterUNet {
  using scalar_type = T;

  Linear<T> fc1;
  Linear<T> fc2;

  static std::size_t hidden_for(std::size_t c) { return std::max<std::size_t>(1, c / 8); }

  static RouterUNet init(std::size_t c, Rng& rng) {
    const std::size_t hid = hidden_for(c);
    RouterUNet r{Linear<T>::init(c, hid, rng), Linear<T>::init(hid, 1, rng)};
    r.fc2.bias.mutable_data()[0] = static_cast<T>(kRouterBiasInit);
    return r;
  }

  // h: [B, C, H, W] -> k: [B]
  Tensor<T> operator()(const Tensor<T>& h) const {
    if (h.rank() != 4 || h.dim(1) != fc1.in_features()) {
      throw DimensionError("unet router: input " + shape_str(h.shape()) + " for " +
                           std::to_string(fc1.in_features()) + " channels");
    }
    auto pooled = reduce_mean(h, {2, 3});
    return reshape(fc2(silu(fc1(pooled))), {h.dim(0)});
  }

  static std::uint64_t flops(const Shape& block_in) {
    const std::uint64_t c = block_in.at(0), hw = block_in.at(1) * block_in.at(2), hid = hidden_for(c);
    return c * hw + 2 * c * hid + hid + 2 * hid;
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    fc1.for_each_param(prefix + "fc1.", f);
    fc2.for_each_param(prefix + "fc2.", f);
  }
};

// Global path over the token mean (C -> O), local path over the channel mean
// (N -> O), mixed with alpha1/alpha2, then O -> 1.
template <class T>
struct RouterDiT {
  using scalar_type = T;

  Linear<T> global;
  Linear<T> local;
  Linear<T> head;
  double alpha1 = 0.5;
  double alpha2 = 0.5;

  static std::size_t hidden_for(std::size_t c) { return std::max<std::size_t>(1, c / 64); }

  static RouterDiT init(std::size_t n, std::size_t c, Rng& rng, double a1 = 0.5, double a2 = 0.5) {
    const std::size_t o = hidden_for(c);
    RouterDiT r{Linear<T>::init(c, o, rng), Linear<T>::init(n, o, rng), Linear<T>::init(o, 1, rng), a1, a2};
    r.head.bias.mutable_data()[0] = static_cast<T>(kRouterBiasInit);
    return r;
  }

  // h: [B, N, C] -> k: [B]
  Tensor<T> operator()(const Tensor<T>& h) const {
    if (h.rank() != 3 || h.dim(1) != local.in_features() || h.dim(2) != global.in_features()) {
      throw DimensionError("dit router: input " + shape_str(h.shape()));
    }
    auto hg = global(reduce_mean(h, {1}));
    auto hl = local(reduce_mean(h, {2}));
    auto mix = add(scale(hg, static_cast<T>(alpha1)), scale(hl, static_cast<T>(alpha2)));
    return reshape(head(mix), {h.dim(0)});
  }

  static std::uint64_t flops(const Shape& block_in) {
    const std::uint64_t n = block_in.at(0), c = block_in.at(1), o = hidden_for(c);
    return 2 * n * c + 2 * c * o + 2 * n * o + 3 * o + 2 * o;
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    global.for_each_param(prefix + "global.", f);
    local.for_each_param(prefix + "local.", f);
    head.for_each_param(prefix + "head.", f);
  }
};

}  // namespace flexctl
