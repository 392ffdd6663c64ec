#pragma once

// Metrics and runtime benchmarking.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "lcmsr/error.hpp"
#include "lcmsr/sampler.hpp"
#include "lcmsr/tensor_ops.hpp"

namespace lcmsr {

// 10 log10(peak^2 / MSE); `cap` when the images are identical.
inline double psnr(const torch::Tensor& a, const torch::Tensor& b, double peak = 255.0, double cap = 100.0) {
  if (!a.sizes().equals(b.sizes())) throw ShapeError("PSNR operands differ: " + shape_str(a) + " vs " + shape_str(b));
  if (!(peak > 0.0)) throw RangeError("PSNR peak must be positive");
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).square().mean().item<double>();
  if (mse == 0.0) return cap;
  return 10.0 * std::log10(peak * peak / mse);
}

// [-1, 1] tensors -> 8-bit values (as doubles), using the same rounding as the PNG writer.
inline torch::Tensor to_8bit_scale(const torch::Tensor& x) {
  auto v = (x.detach().to(torch::kFloat64) + 1.0) * 127.5;
  return (torch::sign(v) * torch::floor(v.abs() + 0.5)).clamp(0.0, 255.0);
}

// PSNR of two [-1, 1] images after 8-bit quantization, peak 255.
inline double psnr_8bit(const torch::Tensor& a, const torch::Tensor& b, double cap = 100.0) {
  return psnr(to_8bit_scale(a), to_8bit_scale(b), 255.0, cap);
}

// Registry for externally supplied perceptual metrics (FID, LPIPS, ...).
class MetricRegistry {
 public:
  using Metric = std::function<double(const torch::Tensor&, const torch::Tensor&)>;

  void add(const std::string& name, Metric fn) { metrics_[name] = std::move(fn); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : metrics_) out.push_back(k);
    return out;
  }

  double evaluate(const std::string& name, const torch::Tensor& a, const torch::Tensor& b) const {
    auto it = metrics_.find(name);
    if (it == metrics_.end()) {
      std::string known;
      for (const auto& n : names()) known += (known.empty() ? "" : ", ") + n;
      throw UnknownMetric("unknown metric '" + name + "'; registered: " + (known.empty() ? "(none)" : known));
    }
    return it->second(a, b);
  }

 private:
  std::map<std::string, Metric> metrics_;
};

inline double perceptual_metric_plugin(const MetricRegistry& registry, const std::string& name,
                                       const torch::Tensor& a, const torch::Tensor& b) {
  return registry.evaluate(name, a, b);
}

struct SamplerVariant {
  std::int64_t steps = 0;  // 0: single-step consistency sampler, n: n-step ancestral baseline

  static SamplerVariant single_step() { return {0}; }
  static SamplerVariant ancestral(std::int64_t n) { return {n}; }
  std::string name() const { return steps == 0 ? "consistency_1step" : "ancestral_" + std::to_string(steps) + "step"; }
};

struct Stats {
  double mean = 0.0;
  double std = 0.0;
};

inline Stats stats_of(const std::vector<double>& v) {
  Stats s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - s.mean) * (x - s.mean);
  s.std = v.size() > 1 ? std::sqrt(acc / double(v.size() - 1)) : 0.0;
  return s;
}

struct TimingReport {
  std::string variant;
  std::int64_t repeats = 0;
  std::int64_t warmup = 0;
  Stats total, cond, sampling, decode;
  std::int64_t denoiser_calls = 0;  // per sample, read from the denoiser's counter

  nlohmann::json to_json() const {
    auto st = [](const Stats& s) { return nlohmann::json{{"mean_s", s.mean}, {"std_s", s.std}}; };
    return {{"variant", variant}, {"repeats", repeats}, {"warmup", warmup}, {"total", st(total)},
            {"phases", {{"cond", st(cond)}, {"sampling", st(sampling)}, {"decode", st(decode)}}},
            {"denoiser_calls", denoiser_calls}};
  }
};

inline std::string hardware_descriptor() {
  std::string model = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      model = line.substr(line.find(':') + 2);
      break;
    }
  }
  return model + ", " + std::to_string(std::thread::hardware_concurrency()) + " hw threads, torch threads " +
         std::to_string(at::get_num_threads());
}

// Wall-clock per sample with `warmup` untimed runs first. The denoiser call
// count per sample comes from the online network's counter.
inline TimingReport benchmark_runtime(const SamplerVariant& variant, const torch::Tensor& lr, LcdNetworks& lcd,
                                      RaeNetworks& rae, const NoiseSchedule& schedule, std::int64_t repeats,
                                      std::int64_t warmup = 1, std::uint64_t seed = 0) {
  if (repeats < 3) throw ValidationError("benchmark needs at least 3 repeats");
  auto run = [&](PhaseTimes* times) {
    return variant.steps == 0 ? sample_single_step(lr, lcd, rae, schedule, seed, times)
                              : sample_ancestral(lr, lcd, rae, schedule, variant.steps, seed, times);
  };
  for (std::int64_t i = 0; i < warmup; ++i) run(nullptr);

  TimingReport report;
  report.variant = variant.name();
  report.repeats = repeats;
  report.warmup = warmup;
  std::vector<double> total, cond, sampling, decode;
  std::int64_t calls = 0;
  for (std::int64_t i = 0; i < repeats; ++i) {
    PhaseTimes times;
    const auto before = lcd.online->calls;
    run(&times);
    calls = lcd.online->calls - before;
    total.push_back(times.total());
    cond.push_back(times.cond);
    sampling.push_back(times.sampling);
    decode.push_back(times.decode);
  }
  report.total = stats_of(total);
  report.cond = stats_of(cond);
  report.sampling = stats_of(sampling);
  report.decode = stats_of(decode);
  report.denoiser_calls = calls;
  return report;
}

}  // namespace lcmsr
