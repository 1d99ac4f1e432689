#pragma once

// Procedural training data: one anti-aliased shape per image on a flat
// background, its class is the shape family, and the spatial condition is a
// binary edge map of the image.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "flexctl/errors.hpp"
#include "flexctl/rng.hpp"
#include "flexctl/tensor.hpp"

namespace flexctl {

inline constexpr std::size_t kImageSize = 16;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kNumShapeClasses = 8;
inline constexpr double kEdgeThreshold = 0.3;

enum class ShapeFamily { Rectangle, Disk, Triangle, Plus, Ring, Diamond, Stripes, Corner };

struct SyntheticSample {
  std::vector<float> image;      // [3, 16, 16], CHW, values in [-1, 1]
  std::vector<float> condition;  // [1, 16, 16], values in {0, 1}
  int class_id = 0;
};

struct ShapeParams {
  ShapeFamily family = ShapeFamily::Rectangle;
  double cx = 8, cy = 8;   // centre in pixel units
  double rx = 4, ry = 4;   // half extents
  std::array<float, 3> fg{1, 1, 1};
  std::array<float, 3> bg{-1, -1, -1};
};

namespace detail {

inline bool inside(const ShapeParams& s, double x, double y) {
  const double u = (x - s.cx) / s.rx, v = (y - s.cy) / s.ry;
  const double au = std::abs(u), av = std::abs(v);
  switch (s.family) {
    case ShapeFamily::Rectangle: return au <= 1 && av <= 1;
    case ShapeFamily::Disk: return u * u + v * v <= 1;
    case ShapeFamily::Triangle: return v <= 1 && v >= -1 && au <= (v + 1) / 2;
    case ShapeFamily::Plus: return (au <= 1 && av <= 0.35) || (av <= 1 && au <= 0.35);
    case ShapeFamily::Ring: {
      const double r2 = u * u + v * v;
      return r2 <= 1 && r2 >= 0.36;
    }
    case ShapeFamily::Diamond: return au + av <= 1;
    case ShapeFamily::Stripes: return au <= 1 && av <= 1 && std::fmod(v + 1, 0.8) < 0.4;
    case ShapeFamily::Corner: return au <= 1 && av <= 1 && (u <= -0.3 || v >= 0.3);
  }
  return false;
}

inline float gray(const std::array<float, 3>& c) { return (c[0] + c[1] + c[2]) / 3.0f; }

}  // namespace detail

// Binary edge map from central differences of the channel-mean image, with
// replicated borders. image: [C, H, W] CHW.
inline std::vector<float> edge_map(const std::vector<float>& image, std::size_t channels, std::size_t h, std::size_t w,
                                   double threshold = kEdgeThreshold) {
  if (image.size() != channels * h * w) throw DimensionError("edge_map: image size");
  std::vector<double> g(h * w, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < h * w; ++i) g[i] += image[c * h * w + i];
  }
  for (auto& v : g) v /= static_cast<double>(channels);
  auto at = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(h) - 1);
    x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(w) - 1);
    return g[y * w + x];
  };
  std::vector<float> out(h * w, 0.0f);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto iy = static_cast<std::ptrdiff_t>(y), ix = static_cast<std::ptrdiff_t>(x);
      const double gx = (at(iy, ix + 1) - at(iy, ix - 1)) / 2;
      const double gy = (at(iy + 1, ix) - at(iy - 1, ix)) / 2;
      out[y * w + x] = std::sqrt(gx * gx + gy * gy) > threshold ? 1.0f : 0.0f;
    }
  }
  return out;
}

// 4x4 supersampled coverage; pixel = bg + coverage * (fg - bg).
inline std::vector<float> render_shape(const ShapeParams& s, std::size_t size = kImageSize) {
  std::vector<float> img(kImageChannels * size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy) {
        for (int sx = 0; sx < 4; ++sx) {
          hits += detail::inside(s, x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0) ? 1 : 0;
        }
      }
      const float cov = static_cast<float>(hits) / 16.0f;
      for (std::size_t c = 0; c < kImageChannels; ++c) {
        img[(c * size + y) * size + x] = s.bg[c] + cov * (s.fg[c] - s.bg[c]);
      }
    }
  }
  return img;
}

inline ShapeParams random_shape(Rng& rng) {
  ShapeParams s;
  s.family = static_cast<ShapeFamily>(rng.uniform_int(0, kNumShapeClasses - 1));
  s.rx = rng.uniform(3.0, 6.0);
  s.ry = s.family == ShapeFamily::Disk || s.family == ShapeFamily::Ring ? s.rx : rng.uniform(3.0, 6.0);
  s.cx = rng.uniform(s.rx + 0.5, kImageSize - s.rx - 0.5);
  s.cy = rng.uniform(s.ry + 0.5, kImageSize - s.ry - 0.5);
  for (auto& c : s.bg) c = static_cast<float>(rng.uniform(-1.0, 1.0));
  // Foreground must differ from the background in brightness so edges exist.
  do {
    for (auto& c : s.fg) c = static_cast<float>(rng.uniform(-1.0, 1.0));
  } while (std::abs(detail::gray(s.fg) - detail::gray(s.bg)) < 0.6f);
  return s;
}

inline SyntheticSample make_sample(const ShapeParams& s) {
  SyntheticSample out;
  out.image = render_shape(s);
  out.condition = edge_map(out.image, kImageChannels, kImageSize, kImageSize);
  out.class_id = static_cast<int>(s.family);
  return out;
}

inline std::vector<SyntheticSample> generate_synthetic(std::uint64_t seed, std::size_t n) {
  if (n < 1) throw UsageError("generate_synthetic needs n >= 1");
  Rng rng(seed);
  std::vector<SyntheticSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_sample(random_shape(rng)));
  return out;
}

// Stack samples into batch tensors.
template <class T>
struct Batch {
  Tensor<T> images;      // [B, 3, 16, 16]
  Tensor<T> conditions;  // [B, 1, 16, 16]
  std::vector<int> class_ids;
};

template <class T>
Batch<T> make_batch(const std::vector<SyntheticSample>& data, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw UsageError("make_batch: empty index list");
  const std::size_t img = kImageChannels * kImageSize * kImageSize, cnd = kImageSize * kImageSize;
  std::vector<T> x, c;
  x.reserve(idx.size() * img);
  c.reserve(idx.size() * cnd);
  Batch<T> b;
  for (auto i : idx) {
    const auto& s = data.at(i);
    x.insert(x.end(), s.image.begin(), s.image.end());
    c.insert(c.end(), s.condition.begin(), s.condition.end());
    b.class_ids.push_back(s.class_id);
  }
  b.images = Tensor<T>::from_data({idx.size(), kImageChannels, kImageSize, kImageSize}, std::move(x));
  b.conditions = Tensor<T>::from_data({idx.size(), 1, kImageSize, kImageSize}, std::move(c));
  return b;
}

}  // namespace flexctl
