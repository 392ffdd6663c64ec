#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "lcmsr/lcmsr.hpp"

namespace lcmsr::test {

// Small enough for float64 finite differences over every parameter.
inline ModelSpec toy_spec() {
  ModelSpec s;
  s.image_channels = 3;
  s.latent_channels = 2;
  s.downsample_factor = 2;
  s.ae_base_width = 4;
  s.cond_base_width = 4;
  s.sr_width = 4;
  s.num_fru = 2;
  s.imdb_per_fru = 1;
  s.unet_base_width = 4;
  s.unet_mults = {1, 2};
  s.disc_base_width = 4;
  return s;
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("lcmsr_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Replaces every parameter (zero-initialised projections and norm gains
// included) with random values so gradient checks exercise all paths.
inline void randomize(torch::nn::Module& m, std::uint64_t seed, double scale = 0.5) {
  auto gen = make_generator(seed);
  torch::NoGradGuard no_grad;
  for (auto& p : m.parameters()) {
    const double fan_in = p.dim() >= 2 ? static_cast<double>(p.numel() / p.size(0)) : 1.0;
    p.copy_(torch::randn(p.sizes(), gen, p.options()) * (scale / std::sqrt(fan_in)));
  }
}

struct GradCheck {
  std::int64_t checked = 0;
  double worst_rel = 0.0;
  std::string worst_path;
};

// Central differences over every element of every tensor in `params`,
// compared with the gradients already stored in `.grad()`.
inline GradCheck check_gradients(const ParameterSet& params, const std::function<double()>& loss, double h = 1e-6,
                                 double floor = 1e-6) {
  GradCheck out;
  torch::NoGradGuard no_grad;
  for (const auto& e : params) {
    auto flat = e.tensor.view({-1});
    const auto grad = e.tensor.grad().defined() ? e.tensor.grad().reshape({-1}).clone()
                                                : torch::zeros_like(flat);
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
      const double orig = flat[i].item<double>();
      flat[i] = orig + h;
      const double up = loss();
      flat[i] = orig - h;
      const double down = loss();
      flat[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grad[i].item<double>();
      const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), floor});
      ++out.checked;
      if (rel > out.worst_rel) {
        out.worst_rel = rel;
        out.worst_path = e.path + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

// Noise source that hands out a fixed sequence and counts calls.
class CountingNoise final : public NoiseSource {
 public:
  explicit CountingNoise(std::uint64_t seed) : inner_(seed) {}
  torch::Tensor normal(torch::IntArrayRef shape, torch::ScalarType dtype) override {
    ++normal_calls;
    last_normal = inner_.normal(shape, dtype);
    return last_normal;
  }
  torch::Tensor uniform_int(std::int64_t low, std::int64_t high, std::int64_t n) override {
    ++int_calls;
    last_int = forced_t.defined() ? forced_t : inner_.uniform_int(low, high, n);
    return last_int;
  }

  int normal_calls = 0;
  int int_calls = 0;
  torch::Tensor last_normal, last_int, forced_t;

 private:
  GeneratorNoise inner_;
};

inline Batch toy_batch(std::int64_t n, std::int64_t hr_size, std::uint64_t seed, torch::ScalarType dtype) {
  return collate_all(synth_corpus(n, hr_size, seed), dtype);
}


// CT + KD with the target output computed once and then held constant, which
// is what the stopgrad contract differentiates. Finite differences of the plain
// loss would also move the anchor through the shared condition.
struct FrozenAnchorLoss {
  const Batch& batch;
  torch::Tensor z0, t, eps, anchor;
  LcdNetworks& nets;
  ConsistencyConfig cfg;
  const NoiseSchedule& schedule;

  FrozenAnchorLoss(const Batch& b, torch::Tensor z0_, torch::Tensor t_, torch::Tensor eps_, LcdNetworks& n,
                   ConsistencyConfig c, const NoiseSchedule& s)
      : batch(b), z0(std::move(z0_)), t(std::move(t_)), eps(std::move(eps_)), nets(n), cfg(c), schedule(s) {
    torch::NoGradGuard no_grad;
    anchor = consistency_fn(forward_noise(z0, t, eps, schedule), cond_features(batch.lr_up, nets.cond), t,
                            nets.target, schedule);
  }

  double operator()() const {
    torch::NoGradGuard no_grad;
    const auto cond = cond_features(batch.lr_up, nets.cond);
    const auto t_next = t + cfg.k;
    auto pred = consistency_fn(forward_noise(z0, t_next, eps, schedule), cond, t_next, nets.online, schedule);
    return (cfg.lambda_ct * mean_abs(pred, anchor) + cfg.lambda_kd * mean_abs(cond, z0)).item<double>();
  }
};

}  // namespace lcmsr::test
