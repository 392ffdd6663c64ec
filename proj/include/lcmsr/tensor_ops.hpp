#pragma once

// Small tensor utilities shared by the networks and the data pipeline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "lcmsr/error.hpp"

namespace lcmsr {

struct Rational {
  std::int64_t num = 1;
  std::int64_t den = 1;
};

inline std::string shape_str(const torch::Tensor& t) {
  std::string s = "(";
  for (std::int64_t i = 0; i < t.dim(); ++i) {
    if (i) s += "x";
    s += std::to_string(t.size(i));
  }
  return s + ")";
}

// Runs a batched (NCHW) function on either a single CHW image or a batch.
template <class Fn>
torch::Tensor apply_batched(const torch::Tensor& x, Fn&& fn) {
  if (x.dim() == 3) return fn(x.unsqueeze(0)).squeeze(0);
  if (x.dim() == 4) return fn(x);
  throw ShapeError("expected CHW or NCHW tensor, got " + shape_str(x));
}

namespace detail {

// Keys cubic convolution kernel.
inline double cubic_kernel(double x, double a = -0.5) {
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

}  // namespace detail

// Row-stochastic [out_size, in_size] interpolation matrix for one axis. When
// shrinking, the kernel support widens by the reduction factor (anti-aliasing).
// Out-of-range taps are clamped onto the border pixel.
inline std::vector<double> bicubic_weights(std::int64_t in_size, std::int64_t out_size) {
  if (in_size < 1 || out_size < 1) throw ShapeError("resize sizes must be positive");
  const double scale = static_cast<double>(out_size) / static_cast<double>(in_size);
  const double kscale = std::min(scale, 1.0);
  const double support = 2.0 / kscale;
  std::vector<double> w(static_cast<std::size_t>(out_size * in_size), 0.0);
  for (std::int64_t i = 0; i < out_size; ++i) {
    const double center = (static_cast<double>(i) + 0.5) / scale - 0.5;
    const auto left = static_cast<std::int64_t>(std::floor(center - support));
    const auto right = static_cast<std::int64_t>(std::ceil(center + support));
    double* row = w.data() + i * in_size;
    double total = 0.0;
    for (std::int64_t j = left; j <= right; ++j) {
      const double k = detail::cubic_kernel((center - static_cast<double>(j)) * kscale);
      if (k == 0.0) continue;
      row[std::clamp<std::int64_t>(j, 0, in_size - 1)] += k;
      total += k;
    }
    for (std::int64_t j = 0; j < in_size; ++j) row[j] /= total;
  }
  return w;
}

// Bicubic resize (a = -0.5) of a [..., H, W] tensor to explicit output dims.
inline torch::Tensor bicubic_resize(const torch::Tensor& image, std::int64_t out_h, std::int64_t out_w) {
  if (image.dim() < 2) throw ShapeError("resize needs at least 2 dims, got " + shape_str(image));
  const auto in_h = image.size(-2);
  const auto in_w = image.size(-1);
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto wh = torch::tensor(bicubic_weights(in_h, out_h), opts).view({out_h, in_h}).to(image.scalar_type());
  auto ww = torch::tensor(bicubic_weights(in_w, out_w), opts).view({out_w, in_w}).to(image.scalar_type());
  return torch::matmul(wh, torch::matmul(image, ww.t()));
}

inline torch::Tensor bicubic_resize(const torch::Tensor& image, Rational scale) {
  if (scale.num <= 0 || scale.den <= 0) throw ShapeError("scale must be positive");
  if (image.dim() < 2) throw ShapeError("resize needs at least 2 dims, got " + shape_str(image));
  const auto h = image.size(-2) * scale.num;
  const auto w = image.size(-1) * scale.num;
  if (h % scale.den != 0 || w % scale.den != 0) {
    throw ShapeError("resize of " + shape_str(image) + " by " + std::to_string(scale.num) + "/" +
                     std::to_string(scale.den) + " gives non-integral dims");
  }
  return bicubic_resize(image, h / scale.den, w / scale.den);
}

inline torch::Tensor resize_bilinear(const torch::Tensor& x, std::int64_t h, std::int64_t w) {
  if (x.size(-2) == h && x.size(-1) == w) return x;
  namespace F = torch::nn::functional;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<std::int64_t>{h, w})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

inline torch::Tensor pixel_shuffle(const torch::Tensor& x, std::int64_t factor) {
  return apply_batched(x, [&](const torch::Tensor& b) { return torch::pixel_shuffle(b, factor); });
}

inline torch::Tensor pixel_unshuffle(const torch::Tensor& x, std::int64_t factor) {
  return apply_batched(x, [&](const torch::Tensor& b) { return torch::pixel_unshuffle(b, factor); });
}

inline torch::Tensor mean_abs(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) {
    throw ShapeError("L1 operands differ: " + shape_str(a) + " vs " + shape_str(b));
  }
  return (a - b).abs().mean();
}

}  // namespace lcmsr
