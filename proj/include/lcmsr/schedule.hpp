#pragma once

// Diffusion variance schedule and consistency-parameterization coefficients.
//
// Timesteps are 0-based: t = 0 is the clean latent and t = T - 1 the noisiest
// level. All tables are kept in double precision and only cast to the network
// dtype when applied to tensors.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "lcmsr/error.hpp"

namespace lcmsr {

struct NoiseSchedule {
  std::int64_t total_steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;
  double sigma_data = 0.5;
  // s(t) = t / timestep_scale feeds the boundary coefficients.
  double timestep_scale = 1.0;

  void check_timestep(std::int64_t t) const {
    if (t < 0 || t >= total_steps) {
      throw RangeError("timestep " + std::to_string(t) + " outside [0, " +
                       std::to_string(total_steps - 1) + "]");
    }
  }
};

inline NoiseSchedule make_schedule(std::int64_t total_steps, double beta_start, double beta_end,
                                   double sigma_data = 0.5, double timestep_scale = 1.0) {
  if (total_steps < 2) throw RangeError("schedule needs at least 2 steps");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
    throw RangeError("schedule requires 0 < beta_start < beta_end < 1");
  }
  if (!(sigma_data > 0.0)) throw RangeError("sigma_data must be positive");
  if (!(timestep_scale > 0.0)) throw RangeError("timestep_scale must be positive");

  NoiseSchedule s;
  s.total_steps = total_steps;
  s.sigma_data = sigma_data;
  s.timestep_scale = timestep_scale;
  s.beta.resize(static_cast<std::size_t>(total_steps));
  s.alpha_bar.resize(static_cast<std::size_t>(total_steps));
  const double step = (beta_end - beta_start) / static_cast<double>(total_steps - 1);
  double running = 1.0;
  for (std::int64_t t = 0; t < total_steps; ++t) {
    // Pin the last entry so the endpoint is exact rather than accumulated.
    const double b = (t == total_steps - 1) ? beta_end : beta_start + static_cast<double>(t) * step;
    running *= (1.0 - b);
    s.beta[static_cast<std::size_t>(t)] = b;
    s.alpha_bar[static_cast<std::size_t>(t)] = running;
  }
  return s;
}

struct BoundaryCoefficients {
  double c_skip;
  double c_out;
};

inline BoundaryCoefficients boundary_coeffs(std::int64_t t, double sigma_data, const NoiseSchedule& schedule) {
  schedule.check_timestep(t);
  if (!(sigma_data > 0.0)) throw RangeError("sigma_data must be positive");
  if (t == 0) return {1.0, 0.0};
  const double s = static_cast<double>(t) / schedule.timestep_scale;
  const double sd2 = sigma_data * sigma_data;
  return {sd2 / (s * s + sd2), s / std::sqrt(s * s + sd2)};
}

inline BoundaryCoefficients boundary_coeffs(std::int64_t t, const NoiseSchedule& schedule) {
  return boundary_coeffs(t, schedule.sigma_data, schedule);
}

namespace detail {

inline void check_timesteps(const torch::Tensor& t, const torch::Tensor& like, const NoiseSchedule& schedule) {
  if (t.dim() != 1 || t.size(0) != like.size(0)) {
    throw ShapeError("timestep tensor must have one entry per batch element");
  }
  if (t.numel() > 0) {
    const auto lo = t.min().item<std::int64_t>();
    const auto hi = t.max().item<std::int64_t>();
    schedule.check_timestep(lo);
    schedule.check_timestep(hi);
  }
}

// Gathers a per-timestep coefficient into a tensor broadcastable against `like`
// (shape [B, 1, 1, ...]).
template <class Fn>
torch::Tensor per_sample(const torch::Tensor& t, const torch::Tensor& like, Fn&& coeff) {
  auto ts = t.to(torch::kInt64).contiguous();
  const auto* tp = ts.data_ptr<std::int64_t>();
  std::vector<double> values(static_cast<std::size_t>(ts.numel()));
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = coeff(tp[i]);
  std::vector<std::int64_t> shape(static_cast<std::size_t>(like.dim()), 1);
  shape[0] = ts.numel();
  return torch::tensor(values, torch::kFloat64).view(shape).to(like.scalar_type());
}

}  // namespace detail

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with one timestep per batch element.
inline torch::Tensor forward_noise(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                                   const NoiseSchedule& schedule) {
  if (!eps.sizes().equals(z0.sizes())) throw ShapeError("noise shape differs from latent shape");
  detail::check_timesteps(t, z0, schedule);
  auto signal = detail::per_sample(t, z0, [&](std::int64_t i) { return std::sqrt(schedule.alpha_bar[i]); });
  auto noise = detail::per_sample(t, z0, [&](std::int64_t i) { return std::sqrt(1.0 - schedule.alpha_bar[i]); });
  return signal * z0 + noise * eps;
}

// Single timestep applied to the whole tensor (any shape).
inline torch::Tensor forward_noise(const torch::Tensor& z0, std::int64_t t, const torch::Tensor& eps,
                                   const NoiseSchedule& schedule) {
  if (!eps.sizes().equals(z0.sizes())) throw ShapeError("noise shape differs from latent shape");
  schedule.check_timestep(t);
  const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

}  // namespace lcmsr
