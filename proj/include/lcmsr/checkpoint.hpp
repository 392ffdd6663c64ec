#pragma once

// Checkpoint container, format version 1.
//
//   bytes 0..7    magic "LCMSRCKP"
//   bytes 8..11   uint32 format version
//   bytes 12..19  uint64 manifest length M
//   next M bytes  manifest, UTF-8 JSON
//   remainder     tensor payload
//
// manifest["tensors"] lists {name, dtype ("f32" | "f64" | "i64"), shape, offset,
// nbytes}; offsets are relative to the start of the payload and data is stored
// contiguous, row-major, little-endian. Everything else in the manifest (kind,
// epoch, global step, seed, resolved config, model spec) is free-form metadata.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "lcmsr/error.hpp"
#include "lcmsr/params.hpp"
#include "lcmsr/tensor_ops.hpp"

namespace lcmsr {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'L', 'C', 'M', 'S', 'R', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::string dtype_tag(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    default: throw IoError("unsupported tensor dtype in checkpoint");
  }
}

inline torch::ScalarType dtype_from_tag(const std::string& s) {
  if (s == "f32") return torch::kFloat32;
  if (s == "f64") return torch::kFloat64;
  if (s == "i64") return torch::kInt64;
  throw IoError("unknown dtype tag '" + s + "' in checkpoint");
}

}  // namespace detail

class Checkpoint {
 public:
  nlohmann::json meta = nlohmann::json::object();

  void put(const std::string& name, const torch::Tensor& t) {
    if (!tensors_.emplace(name, t.detach().contiguous().clone()).second) {
      throw IoError("duplicate checkpoint tensor " + name);
    }
    order_.push_back(name);
  }

  void put(const ParameterSet& params, const std::string& prefix = "") {
    for (const auto& e : params) put(prefix + e.path, e.tensor);
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const torch::Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw IoError("checkpoint has no tensor '" + name + "'");
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }

  // Copies stored tensors into `params` (shapes must match exactly).
  void restore(const ParameterSet& params, const std::string& prefix = "") const {
    torch::NoGradGuard no_grad;
    for (const auto& e : params) {
      const auto& src = at(prefix + e.path);
      if (!src.sizes().equals(e.tensor.sizes())) {
        throw ShapeError("checkpoint tensor " + prefix + e.path + " has shape " + shape_str(src) +
                         ", network expects " + shape_str(e.tensor));
      }
      e.tensor.copy_(src);
    }
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json manifest = meta;
    manifest["format_version"] = kCheckpointVersion;
    nlohmann::json entries = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& name : order_) {
      const auto& t = tensors_.at(name);
      const auto nbytes = static_cast<std::uint64_t>(t.numel()) * t.element_size();
      entries.push_back({{"name", name},
                         {"dtype", detail::dtype_tag(t.scalar_type())},
                         {"shape", t.sizes().vec()},
                         {"offset", offset},
                         {"nbytes", nbytes}});
      offset += nbytes;
    }
    manifest["tensors"] = entries;
    const auto text = manifest.dump();

    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw IoError("cannot write checkpoint " + path.string());
      const std::uint64_t len = text.size();
      out.write(kCheckpointMagic, sizeof kCheckpointMagic);
      out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);
      out.write(reinterpret_cast<const char*>(&len), sizeof len);
      out.write(text.data(), static_cast<std::streamsize>(text.size()));
      for (const auto& name : order_) {
        const auto& t = tensors_.at(name);
        out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
      }
      if (!out) throw IoError("short write on checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    in.read(magic, sizeof magic);
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
      throw IoError("not a checkpoint file: " + path.string());
    }
    if (version != kCheckpointVersion) {
      throw IoError("checkpoint " + path.string() + " has format version " + std::to_string(version) +
                    ", expected " + std::to_string(kCheckpointVersion));
    }
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError("truncated checkpoint manifest: " + path.string());

    Checkpoint ck;
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("corrupt checkpoint manifest in " + path.string() + ": " + e.what());
    }
    const auto payload_start = in.tellg();
    for (const auto& entry : manifest.at("tensors")) {
      const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
      auto t = torch::empty(shape, torch::TensorOptions().dtype(detail::dtype_from_tag(entry.at("dtype"))));
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (nbytes != static_cast<std::uint64_t>(t.numel()) * t.element_size()) {
        throw IoError("checkpoint entry size mismatch for " + entry.at("name").get<std::string>());
      }
      in.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
      in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
      if (!in) throw IoError("truncated checkpoint payload: " + path.string());
      ck.put(entry.at("name").get<std::string>(), t);
    }
    manifest.erase("tensors");
    ck.meta = std::move(manifest);
    return ck;
  }

 private:
  std::map<std::string, torch::Tensor> tensors_;
  std::vector<std::string> order_;
};

// Adam moments for the parameters in `params`, keyed by parameter path.
inline void put_adam_state(Checkpoint& ck, torch::optim::Adam& opt, const ParameterSet& params,
                           const std::string& prefix) {
  auto& state = opt.state();
  for (const auto& e : params) {
    auto it = state.find(e.tensor.unsafeGetTensorImpl());
    if (it == state.end()) continue;
    auto& s = static_cast<torch::optim::AdamParamState&>(*it->second);
    ck.put(prefix + e.path + "#exp_avg", s.exp_avg());
    ck.put(prefix + e.path + "#exp_avg_sq", s.exp_avg_sq());
    ck.put(prefix + e.path + "#step", torch::tensor({s.step()}, torch::kInt64));
  }
}

inline void restore_adam_state(const Checkpoint& ck, torch::optim::Adam& opt, const ParameterSet& params,
                               const std::string& prefix) {
  auto& state = opt.state();
  for (const auto& e : params) {
    const auto base = prefix + e.path;
    if (!ck.contains(base + "#step")) continue;
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(ck.at(base + "#step").item<std::int64_t>());
    s->exp_avg(ck.at(base + "#exp_avg").clone().to(e.tensor.scalar_type()));
    s->exp_avg_sq(ck.at(base + "#exp_avg_sq").clone().to(e.tensor.scalar_type()));
    state[e.tensor.unsafeGetTensorImpl()] = std::move(s);
  }
}

}  // namespace lcmsr
