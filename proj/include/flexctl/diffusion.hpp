#pragma once

// Forward corruption and reverse steps for the DDPM/DDIM formulation and for
// straight-path flow matching.
//
// Timesteps of the discrete schedule are 1-based: t in [1, T]. alpha_bar(0)
// is defined as 1, so t_prev = 0 in a DDIM step means "return the clean
// estimate".

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "flexctl/errors.hpp"
#include "flexctl/tensor.hpp"

namespace flexctl {

struct NoiseSchedule {
  std::size_t steps = 0;            // T
  std::vector<double> beta;         // index t-1
  std::vector<double> alpha;        // 1 - beta
  std::vector<double> alpha_bar;    // prod_{i<=t} alpha_i
  std::vector<double> sigma2;       // (1 - abar_{t-1}) / (1 - abar_t) * beta_t
  std::vector<double> snr;          // abar / (1 - abar)
  std::vector<double> weight;       // w(snr), fixed to 1 (unweighted MSE)

  double beta_at(std::size_t t) const { return beta.at(check(t) - 1); }
  double alpha_at(std::size_t t) const { return alpha.at(check(t) - 1); }
  double sigma2_at(std::size_t t) const { return sigma2.at(check(t) - 1); }
  double alpha_bar_at(std::size_t t) const {
    if (t == 0) return 1.0;
    return alpha_bar.at(check(t) - 1);
  }

 private:
  std::size_t check(std::size_t t) const {
    if (t < 1 || t > steps) {
      throw UsageError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
    }
    return t;
  }
};

// Builds a schedule from an explicit beta sequence (beta[0] is beta_1).
inline NoiseSchedule make_schedule(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("noise schedule needs at least one step");
  NoiseSchedule s;
  s.steps = betas.size();
  s.beta = std::move(betas);
  double prod = 1.0;
  for (std::size_t i = 0; i < s.steps; ++i) {
    const double b = s.beta[i];
    if (!(b >= 0.0 && b < 1.0)) throw ConfigError("beta must lie in [0, 1)");
    s.alpha.push_back(1.0 - b);
    const double prev = prod;
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
    const double denom = 1.0 - prod;
    s.sigma2.push_back(denom > 0.0 ? (1.0 - prev) / denom * b : 0.0);
    s.snr.push_back(denom > 0.0 ? prod / denom : INFINITY);
    s.weight.push_back(1.0);
  }
  return s;
}

inline NoiseSchedule make_linear_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[i] = beta_start + (beta_end - beta_start) * frac;
  }
  return make_schedule(std::move(betas));
}

inline NoiseSchedule default_schedule() { return make_linear_schedule(1000, 1e-4, 0.02); }

namespace detail {
template <class T>
Tensor<T> affine2(const Tensor<T>& a, double ca, const Tensor<T>& b, double cb) {
  if (a.shape() != b.shape()) throw DimensionError("shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.requires_grad() || b.requires_grad()) return add(scale(a, static_cast<T>(ca)), scale(b, static_cast<T>(cb)));
  // constant inputs: evaluate in double and round once
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(ca * static_cast<double>(a[i]) + cb * static_cast<double>(b[i]));
  }
  return Tensor<T>::from_data(a.shape(), std::move(out));
}
}  // namespace detail

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, std::size_t t, const Tensor<T>& eps, const NoiseSchedule& s) {
  if (t == 0) throw UsageError("q_sample needs t >= 1");
  const double ab = s.alpha_bar_at(t);
  return detail::affine2(x0, std::sqrt(ab), eps, std::sqrt(1.0 - ab));
}

// Ancestral step: x_{t-1} = mu + sigma_t z, with
// mu = (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t).
// The noise term is dropped at t = 1.
template <class T>
Tensor<T> ddpm_posterior_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, std::size_t t, const NoiseSchedule& s,
                              const Tensor<T>& z) {
  const double a = s.alpha_at(t);
  const double ab = s.alpha_bar_at(t);
  const double coef = ab < 1.0 ? (1.0 - a) / std::sqrt(1.0 - ab) : 0.0;
  auto mu = detail::affine2(x_t, 1.0 / std::sqrt(a), eps_hat, -coef / std::sqrt(a));
  if (t == 1) return mu;
  if (z.shape() != x_t.shape()) throw DimensionError("ddpm_posterior_step: noise shape");
  return add(mu, scale(z, static_cast<T>(std::sqrt(s.sigma2_at(t)))));
}

// Deterministic DDIM update from t to t_prev.
template <class T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, std::size_t t, std::size_t t_prev,
                    const NoiseSchedule& s, bool clip_x0 = false) {
  if (t_prev >= t) {
    throw UsageError("ddim_step needs t_prev < t (got t=" + std::to_string(t) + ", t_prev=" + std::to_string(t_prev) + ")");
  }
  const double ab = s.alpha_bar_at(t);
  const double ab_prev = s.alpha_bar_at(t_prev);
  if (clip_x0) {
    // x0_hat clamped to the data range; eps is re-derived so the step stays on
    // the DDIM line through the clamped estimate
    std::vector<T> out(x_t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double x = x_t[i];
      const double x0 = std::clamp((x - std::sqrt(1.0 - ab) * eps_hat[i]) / std::sqrt(ab), -1.0, 1.0);
      const double e = (x - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
      out[i] = static_cast<T>(t_prev == 0 ? x0 : std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * e);
    }
    return Tensor<T>::from_data(x_t.shape(), std::move(out));
  }
  // x0_hat = (x_t - sqrt(1-ab) eps) / sqrt(ab)
  auto x0_hat = detail::affine2(x_t, 1.0 / std::sqrt(ab), eps_hat, -std::sqrt(1.0 - ab) / std::sqrt(ab));
  if (t_prev == 0) return x0_hat;
  return detail::affine2(x0_hat, std::sqrt(ab_prev), eps_hat, std::sqrt(1.0 - ab_prev));
}

// Uniform DDIM sub-schedule, e.g. T=1000, 20 steps -> 1000, 950, ..., 50.
inline std::vector<std::size_t> ddim_timesteps(std::size_t total, std::size_t steps) {
  if (steps < 1 || steps > total) throw UsageError("ddim_timesteps: need 1 <= steps <= T");
  std::vector<std::size_t> ts;
  const std::size_t stride = total / steps;
  for (std::size_t i = 0; i < steps; ++i) ts.push_back(total - i * stride);
  return ts;
}

// Straight path between data (t = 0) and noise (t = 1): a_t = 1 - t, b_t = t.
struct FlowSchedule {
  double a(double t) const { return 1.0 - t; }
  double b(double t) const { return t; }
};

template <class T>
Tensor<T> flow_sample(const Tensor<T>& x0, double t, const Tensor<T>& eps, const FlowSchedule& f = {}) {
  if (!(t >= 0.0 && t <= 1.0)) throw UsageError("flow_sample needs t in [0, 1]");
  return detail::affine2(x0, f.a(t), eps, f.b(t));
}

// Regression target d x_t / d t under the straight path.
template <class T>
Tensor<T> flow_velocity(const Tensor<T>& x0, const Tensor<T>& eps) {
  return sub(eps, x0);
}

// One explicit Euler step of dx/dt = v.
template <class T>
Tensor<T> rflow_step(const Tensor<T>& x, const Tensor<T>& v_hat, double dt) {
  if (!std::isfinite(dt)) throw UsageError("rflow_step needs finite dt");
  if (x.shape() != v_hat.shape()) throw DimensionError("rflow_step: shape mismatch");
  return add(x, scale(v_hat, static_cast<T>(dt)));
}

}  // namespace flexctl
