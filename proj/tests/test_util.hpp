#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "flexctl/rng.hpp"
#include "flexctl/tensor.hpp"

namespace testutil {

using flexctl::Rng;
using flexctl::Shape;
using flexctl::Tensor;

template <class T>
Tensor<T> randn(Shape shape, Rng& rng, double sd = 1.0, bool param = false) {
  std::vector<T> v(flexctl::shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(sd * rng.normal());
  return param ? Tensor<T>::parameter(std::move(shape), std::move(v)) : Tensor<T>::from_data(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> randu(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<T> v(flexctl::shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>::from_data(std::move(shape), std::move(v));
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

// Relative error with a small floor on the denominator.
inline double rel_err(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-3}); }

// Largest relative error between reverse-mode and central-difference
// gradients of a scalar function of `inputs` (64-bit).
inline double grad_check(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                         std::vector<Tensor<double>> inputs, double eps = 1e-4) {
  std::vector<Tensor<double>> analytic;
  {
    flexctl::GradTape<double> tape;
    auto loss = f(inputs);
    analytic = tape.gradient(loss, inputs);
  }
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double up = f(inputs).item();
      data[i] = orig - eps;
      const double down = f(inputs).item();
      data[i] = orig;
      worst = std::max(worst, rel_err(analytic[k][i], (up - down) / (2 * eps)));
    }
  }
  return worst;
}

// Scalar projection with fixed random weights, so every output element
// carries a distinct gradient.
inline Tensor<double> project(const Tensor<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  auto w = randn<double>(y.shape(), rng);
  return flexctl::sum(flexctl::mul(y, w));
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("flexctl_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
