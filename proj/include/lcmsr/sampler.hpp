#pragma once

// Inference. The consistency sampler draws z ~ N(0, I) as the latent at
// t = T - 1 and maps it to z0 with one denoiser call. The ancestral sampler is
// the classical iterative baseline over a uniformly strided timestep subset and
// exists for runtime comparison.
//
// The decoder consumes the native LR image; the conditional network consumes
// its bicubic x4 upsampling.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "lcmsr/backbone.hpp"
#include "lcmsr/lcd_stage.hpp"
#include "lcmsr/noise.hpp"
#include "lcmsr/schedule.hpp"

namespace lcmsr {

struct PhaseTimes {
  double cond = 0.0;      // seconds in the conditional network
  double sampling = 0.0;  // seconds in the latent sampling loop (denoiser calls + updates)
  double decode = 0.0;    // seconds in the decoder
  double total() const { return cond + sampling + decode; }
};

// Descending timesteps from T-1 down to 0, evenly strided; n == 1 gives {T-1}.
inline std::vector<std::int64_t> strided_timesteps(std::int64_t total_steps, std::int64_t n) {
  if (n < 1 || n > total_steps) throw RangeError("number of sampling steps must lie in [1, T]");
  std::vector<std::int64_t> ts;
  if (n == 1) return {total_steps - 1};
  for (std::int64_t i = n - 1; i >= 0; --i) {
    ts.push_back(static_cast<std::int64_t>(std::llround(double(i) * double(total_steps - 1) / double(n - 1))));
  }
  return ts;
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// num_steps == 0 selects the consistency sampler.
inline torch::Tensor sample_impl(const torch::Tensor& lr_in, LcdNetworks& lcd, RaeNetworks& rae,
                                 const NoiseSchedule& schedule, std::int64_t num_steps, std::uint64_t seed,
                                 PhaseTimes* times) {
  torch::NoGradGuard no_grad;
  const bool single = lr_in.dim() == 3;
  auto lr = single ? lr_in.unsqueeze(0) : lr_in;
  if (lr.dim() != 4) throw ShapeError("LR input must be CHW or NCHW, got " + shape_str(lr_in));
  const auto& spec = rae.spec;
  const auto hr_h = lr.size(2) * kScale, hr_w = lr.size(3) * kScale;
  if (hr_h % spec.downsample_factor != 0 || hr_w % spec.downsample_factor != 0) {
    throw ShapeError("LR " + shape_str(lr_in) + " x4 is not divisible by the downsample factor");
  }
  const auto dtype = lcd.online->conv_in->weight.scalar_type();
  lr = lr.to(dtype);

  auto t0 = Clock::now();
  auto cond = cond_features(bicubic_resize(lr, hr_h, hr_w), lcd.cond);
  if (times) times->cond += seconds_since(t0);

  t0 = Clock::now();
  GeneratorNoise noise(derive_seed(seed, Stream::sample));
  const auto n = lr.size(0);
  auto z = noise.normal(cond.sizes(), dtype);
  torch::Tensor z0;
  if (num_steps == 0) {
    z0 = consistency_fn(z, cond, schedule.total_steps - 1, lcd.online, schedule);
  } else {
    const auto ts = strided_timesteps(schedule.total_steps, num_steps);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      const auto t = ts[i];
      const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
      auto eps = denoise_eps(z, cond, torch::full({n}, t, torch::kInt64), lcd.online, schedule);
      auto x0 = (z - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
      if (i + 1 == ts.size()) {
        z0 = x0;
        break;
      }
      const double ab_prev = schedule.alpha_bar[static_cast<std::size_t>(ts[i + 1])];
      const double beta_eff = 1.0 - ab / ab_prev;
      const double mean_x0 = std::sqrt(ab_prev) * beta_eff / (1.0 - ab);
      const double mean_z = std::sqrt(ab / ab_prev) * (1.0 - ab_prev) / (1.0 - ab);
      const double var = (1.0 - ab_prev) / (1.0 - ab) * beta_eff;
      z = mean_x0 * x0 + mean_z * z + std::sqrt(var) * noise.normal(z.sizes(), dtype);
    }
  }
  if (times) times->sampling += seconds_since(t0);

  t0 = Clock::now();
  auto sr = rae.decoder->forward(lr.to(rae.decoder->shallow->weight.scalar_type()), z0);
  if (times) times->decode += seconds_since(t0);
  return single ? sr.squeeze(0) : sr;
}

}  // namespace detail

inline torch::Tensor sample_single_step(const torch::Tensor& lr, LcdNetworks& lcd, RaeNetworks& rae,
                                        const NoiseSchedule& schedule, std::uint64_t seed,
                                        PhaseTimes* times = nullptr) {
  return detail::sample_impl(lr, lcd, rae, schedule, 0, seed, times);
}

inline torch::Tensor sample_ancestral(const torch::Tensor& lr, LcdNetworks& lcd, RaeNetworks& rae,
                                      const NoiseSchedule& schedule, std::int64_t num_steps, std::uint64_t seed,
                                      PhaseTimes* times = nullptr) {
  if (num_steps < 1 || num_steps > schedule.total_steps) throw RangeError("num_steps must lie in [1, T]");
  return detail::sample_impl(lr, lcd, rae, schedule, num_steps, seed, times);
}

}  // namespace lcmsr
