#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "flexctl/errors.hpp"
#include "flexctl/nn.hpp"
#include "flexctl/tensor.hpp"

namespace flexctl {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Adam with bias correction and decoupled weight decay:
//   p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)
// Moments are stored in 32-bit floats so checkpoints restore them exactly;
// the update arithmetic is done in double.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  long long step_count() const { return t_; }

  template <class T>
  void step(ParamList<T>& params, const std::vector<Tensor<T>>& grads) {
    if (grads.size() != params.size()) throw UsageError("AdamW: one gradient per parameter required");
    if (m_.empty()) init(params);
    if (m_.size() != params.size()) throw UsageError("AdamW: parameter list changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto p = params[k].tensor.mutable_data();
      const auto g = grads[k].data();
      if (g.size() != p.size() || m_[k].size() != p.size()) {
        throw UsageError("AdamW: shape mismatch for " + params[k].name);
      }
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double m = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * gi;
        const double v = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * gi * gi;
        m_[k][i] = static_cast<float>(m);
        v_[k][i] = static_cast<float>(v);
        const double mh = m / bc1, vh = v / bc2;
        double pi = static_cast<double>(p[i]);
        pi -= cfg_.lr * cfg_.weight_decay * pi;
        pi -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
        p[i] = static_cast<T>(pi);
      }
    }
  }

  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }

  template <class T>
  void init(const ParamList<T>& params) {
    m_.clear();
    v_.clear();
    for (const auto& p : params) {
      m_.emplace_back(p.tensor.numel(), 0.0f);
      v_.emplace_back(p.tensor.numel(), 0.0f);
    }
  }

  void restore(std::vector<std::vector<float>> m, std::vector<std::vector<float>> v, long long t) {
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
  }

 private:
  AdamWConfig cfg_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  long long t_ = 0;
};

}  // namespace flexctl
