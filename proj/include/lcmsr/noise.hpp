#pragma once

// Randomness used by training and sampling. Everything stochastic goes through a
// NoiseSource so tests can substitute counting or replaying sources, and every
// stream is derived from (seed, purpose, index) so a resumed run draws exactly
// what an uninterrupted run would have drawn.

#include <cstdint>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

namespace lcmsr {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

enum class Stream : std::uint64_t { init = 1, shuffle = 2, step = 3, sample = 4, data = 5, disc = 6 };

inline std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(stream))) + index);
}

inline torch::Generator make_generator(std::uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

class NoiseSource {
 public:
  virtual ~NoiseSource() = default;
  virtual torch::Tensor normal(torch::IntArrayRef shape, torch::ScalarType dtype) = 0;
  // n integers drawn uniformly from [low, high).
  virtual torch::Tensor uniform_int(std::int64_t low, std::int64_t high, std::int64_t n) = 0;
};

class GeneratorNoise final : public NoiseSource {
 public:
  explicit GeneratorNoise(std::uint64_t seed) : gen_(make_generator(seed)) {}

  torch::Tensor normal(torch::IntArrayRef shape, torch::ScalarType dtype) override {
    return torch::randn(shape, gen_, torch::TensorOptions().dtype(dtype));
  }

  torch::Tensor uniform_int(std::int64_t low, std::int64_t high, std::int64_t n) override {
    return torch::randint(low, high, {n}, gen_, torch::TensorOptions().dtype(torch::kInt64));
  }

 private:
  torch::Generator gen_;
};

}  // namespace lcmsr
