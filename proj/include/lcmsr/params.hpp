#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include <torch/torch.h>

#include "lcmsr/error.hpp"
#include "lcmsr/noise.hpp"

namespace lcmsr {

// Named view over the trainable tensors of one network. Tensors are shared
// handles: mutating them through a ParameterSet mutates the owning module.
class ParameterSet {
 public:
  struct Entry {
    std::string path;
    torch::Tensor tensor;
  };

  ParameterSet() = default;

  explicit ParameterSet(const torch::nn::Module& module, const std::string& prefix = "") {
    for (const auto& item : module.named_parameters(/*recurse=*/true)) {
      add(prefix + item.key(), item.value());
    }
  }

  void add(std::string path, torch::Tensor tensor) {
    if (!seen_.insert(path).second) throw ValidationError("duplicate parameter path: " + path);
    entries_.push_back({std::move(path), std::move(tensor)});
  }

  void append(const ParameterSet& other) {
    for (const auto& e : other.entries_) add(e.path, e.tensor);
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  std::vector<torch::Tensor> tensors() const {
    std::vector<torch::Tensor> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.tensor);
    return out;
  }

  const torch::Tensor* find(const std::string& path) const {
    for (const auto& e : entries_) {
      if (e.path == path) return &e.tensor;
    }
    return nullptr;
  }

  // Throws unless both sets have the same paths, in order, with equal shapes.
  void check_same_layout(const ParameterSet& other) const {
    if (other.size() != size()) {
      throw ShapeError("parameter sets differ in size: " + std::to_string(size()) + " vs " +
                       std::to_string(other.size()));
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = other.entries_[i];
      if (a.path != b.path) throw ShapeError("parameter path mismatch: " + a.path + " vs " + b.path);
      if (!a.tensor.sizes().equals(b.tensor.sizes())) throw ShapeError("parameter shape mismatch at " + a.path);
    }
  }

  void copy_from(const ParameterSet& other) {
    check_same_layout(other);
    torch::NoGradGuard no_grad;
    for (std::size_t i = 0; i < entries_.size(); ++i) entries_[i].tensor.copy_(other.entries_[i].tensor);
  }

  bool bit_equal(const ParameterSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].path != other.entries_[i].path) return false;
      if (!torch::equal(entries_[i].tensor, other.entries_[i].tensor)) return false;
    }
    return true;
  }

  // Detached deep copy, useful as a snapshot.
  ParameterSet snapshot() const {
    ParameterSet out;
    for (const auto& e : entries_) out.add(e.path, e.tensor.detach().clone());
    return out;
  }

  void set_requires_grad(bool on) const {
    for (const auto& e : entries_) e.tensor.set_requires_grad(on);
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_set<std::string> seen_;
};

// target <- mu * target + (1 - mu) * online, outside autograd.
inline void ema_update(ParameterSet& target, const ParameterSet& online, double mu) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw RangeError("EMA rate must lie in [0, 1]");
  target.check_same_layout(online);
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < target.size(); ++i) {
    target.entries()[i].tensor.mul_(mu).add_(online.entries()[i].tensor, 1.0 - mu);
  }
}

// Fan-in scaled normal init for every conv / linear weight, zero biases. Modules
// that need zero-initialised output projections reset those afterwards.
inline void init_fan_in(torch::nn::Module& module, std::uint64_t seed) {
  auto gen = make_generator(seed);
  torch::NoGradGuard no_grad;
  for (auto& item : module.named_parameters(true)) {
    auto& p = item.value();
    const auto& name = item.key();
    const bool is_bias = name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0;
    if (is_bias) {
      p.zero_();
    } else if (p.dim() >= 2) {
      const double fan_in = static_cast<double>(p.numel() / p.size(0));
      p.copy_(torch::randn(p.sizes(), gen, torch::TensorOptions().dtype(p.scalar_type())) / std::sqrt(fan_in));
    } else {
      p.fill_(1.0);  // norm gains
    }
  }
}

}  // namespace lcmsr
