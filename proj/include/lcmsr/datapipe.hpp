#pragma once

// Dataset ingestion: HR patches, bicubic x4 LR synthesis, deterministic splits
// and a procedural corpus for desk-scale runs. LR images are always derived from
// HR, never loaded independently.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "lcmsr/error.hpp"
#include "lcmsr/image_io.hpp"
#include "lcmsr/noise.hpp"
#include "lcmsr/tensor_ops.hpp"

namespace lcmsr {

inline constexpr std::int64_t kScale = 4;

struct ImagePair {
  torch::Tensor hr;     // C x H x W
  torch::Tensor lr;     // C x H/4 x W/4
  torch::Tensor lr_up;  // C x H x W, bicubic x4 of lr
  std::string source_id;
};

inline ImagePair make_pair(torch::Tensor hr, std::string source_id) {
  if (hr.dim() != 3) throw ShapeError("HR image must be CHW, got " + shape_str(hr));
  if (hr.size(1) % kScale != 0 || hr.size(2) % kScale != 0) {
    throw ShapeError("HR dims " + shape_str(hr) + " not divisible by 4");
  }
  auto lr = bicubic_resize(hr, Rational{1, kScale});
  auto lr_up = bicubic_resize(lr, Rational{kScale, 1});
  return {std::move(hr), std::move(lr), std::move(lr_up), std::move(source_id)};
}

struct Batch {
  torch::Tensor hr, lr, lr_up;
  std::int64_t size() const { return hr.size(0); }
};

inline Batch collate(const std::vector<ImagePair>& pairs, const std::vector<std::int64_t>& indices,
                     torch::ScalarType dtype = torch::kFloat32) {
  std::vector<torch::Tensor> hr, lr, up;
  for (auto i : indices) {
    const auto& p = pairs.at(static_cast<std::size_t>(i));
    hr.push_back(p.hr);
    lr.push_back(p.lr);
    up.push_back(p.lr_up);
  }
  return {torch::stack(hr).to(dtype), torch::stack(lr).to(dtype), torch::stack(up).to(dtype)};
}

inline Batch collate_all(const std::vector<ImagePair>& pairs, torch::ScalarType dtype = torch::kFloat32) {
  std::vector<std::int64_t> idx(pairs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  return collate(pairs, idx, dtype);
}

// Seed-determined visiting order for one epoch.
inline std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, std::int64_t epoch) {
  auto gen = make_generator(derive_seed(seed, Stream::shuffle, static_cast<std::uint64_t>(epoch)));
  auto perm = torch::randperm(n, gen, torch::TensorOptions().dtype(torch::kInt64));
  return {perm.data_ptr<std::int64_t>(), perm.data_ptr<std::int64_t>() + n};
}

// ---------------------------------------------------------------------------
// Procedural corpus.

enum class Pattern { gradient, checkerboard, blobs, band_noise };

inline Pattern pattern_for(std::int64_t index) { return static_cast<Pattern>(index % 4); }

namespace detail {

inline torch::Tensor render_pattern(Pattern kind, std::int64_t channels, std::int64_t size, torch::Generator& gen) {
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * torch::rand({1}, gen, opts).item<double>(); };
  auto coords = torch::arange(size, opts) / double(size - 1);  // [0, 1]
  auto yy = coords.view({size, 1}).expand({size, size});
  auto xx = coords.view({1, size}).expand({size, size});
  std::vector<torch::Tensor> planes;

  switch (kind) {
    case Pattern::gradient: {
      const double angle = uniform(0.0, 2.0 * std::numbers::pi);
      auto ramp = std::cos(angle) * (xx - 0.5) + std::sin(angle) * (yy - 0.5);
      for (std::int64_t c = 0; c < channels; ++c) planes.push_back(uniform(-0.2, 0.2) + uniform(0.8, 1.6) * ramp);
      break;
    }
    case Pattern::checkerboard: {
      const auto period = static_cast<std::int64_t>(uniform(2.0, 7.0));
      const auto off_x = static_cast<std::int64_t>(uniform(0.0, double(period)));
      const auto off_y = static_cast<std::int64_t>(uniform(0.0, double(period)));
      auto ix = (torch::arange(size, torch::kInt64) + off_x).div(period, "floor");
      auto iy = (torch::arange(size, torch::kInt64) + off_y).div(period, "floor");
      auto cells = (iy.view({size, 1}) + ix.view({1, size})).remainder(2).to(torch::kFloat64);
      for (std::int64_t c = 0; c < channels; ++c) {
        const double lo = uniform(-0.9, -0.2), hi = uniform(0.2, 0.9);
        planes.push_back(lo + (hi - lo) * cells);
      }
      break;
    }
    case Pattern::blobs: {
      for (std::int64_t c = 0; c < channels; ++c) planes.push_back(torch::full({size, size}, -0.6, opts));
      const auto count = static_cast<std::int64_t>(uniform(3.0, 7.0));
      for (std::int64_t b = 0; b < count; ++b) {
        const double cx = uniform(0.0, 1.0), cy = uniform(0.0, 1.0), sigma = uniform(0.05, 0.2);
        auto g = torch::exp(-((xx - cx).square() + (yy - cy).square()) / (2.0 * sigma * sigma));
        for (auto& p : planes) p = p + uniform(0.3, 1.0) * g;
      }
      break;
    }
    case Pattern::band_noise: {
      const double sigma = uniform(0.7, 1.5);
      const std::int64_t radius = 3;
      auto taps = torch::arange(-radius, radius + 1, opts);
      auto kernel = torch::exp(-taps.square() / (2.0 * sigma * sigma));
      kernel = kernel / kernel.sum();
      for (std::int64_t c = 0; c < channels; ++c) {
        auto noise = torch::randn({1, 1, size + 2 * radius, size + 2 * radius}, gen, opts);
        noise = torch::conv2d(noise, kernel.view({1, 1, 1, -1}));
        noise = torch::conv2d(noise, kernel.view({1, 1, -1, 1}));
        auto plane = noise.view({size, size});
        planes.push_back(0.6 * plane / (plane.std() + 1e-12));
      }
      break;
    }
  }
  return torch::stack(planes).clamp(-1.0, 1.0);
}

}  // namespace detail

// n procedurally generated pairs. HR values sit on the 8-bit grid so a PNG
// round trip reproduces them exactly.
inline std::vector<ImagePair> synth_corpus(std::int64_t n, std::int64_t hr_size, std::uint64_t seed,
                                           std::int64_t channels = 3, std::int64_t latent_factor = 1) {
  if (n < 1) throw ValidationError("synthetic corpus needs n >= 1");
  if (hr_size < kScale || hr_size % kScale != 0) throw ValidationError("hr_size must be a positive multiple of 4");
  if (latent_factor < 1 || hr_size % latent_factor != 0) {
    throw ValidationError("hr_size must be divisible by the latent downsample factor");
  }
  if (channels != 1 && channels != 3) throw ValidationError("channels must be 1 or 3");
  std::vector<ImagePair> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    auto gen = make_generator(derive_seed(seed, Stream::data, static_cast<std::uint64_t>(i)));
    auto hr = quantize_8bit(detail::render_pattern(pattern_for(i), channels, hr_size, gen)).to(torch::kFloat32);
    char id[32];
    std::snprintf(id, sizeof id, "synth_%05lld", static_cast<long long>(i));
    out.push_back(make_pair(std::move(hr), id));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image-folder datasets.

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DatasetSplits {
  std::vector<ImagePair> train, val, test;
  std::vector<std::string> skipped;  // "path: reason"

  nlohmann::json manifest() const {
    auto ids = [](const std::vector<ImagePair>& v) {
      nlohmann::json a = nlohmann::json::array();
      for (const auto& p : v) a.push_back(p.source_id);
      return a;
    };
    return {{"train", ids(train)}, {"val", ids(val)}, {"test", ids(test)}, {"skipped", skipped}};
  }
};

struct SplitSizes {
  std::int64_t train, val, test;
};

inline SplitSizes split_sizes(std::int64_t n, const SplitFractions& f) {
  if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw ValidationError("split fractions must be non-negative and sum to 1");
  }
  auto train = std::min<std::int64_t>(std::llround(f.train * double(n)), n);
  auto val = std::min<std::int64_t>(std::llround(f.val * double(n)), n - train);
  return {train, val, n - train - val};
}

// Scans `root` (non-recursive) for PNG/JPEG files, crops one HR patch per image
// on a 4-pixel grid and splits the pairs deterministically under `seed`.
inline DatasetSplits build_dataset(const std::filesystem::path& root, std::int64_t patch_size,
                                   const SplitFractions& fractions, std::uint64_t seed, std::int64_t channels = 3) {
  if (patch_size <= 0 || patch_size % kScale != 0) {
    throw ValidationError("patch size " + std::to_string(patch_size) + " is not aligned to the x4 scale");
  }
  if (!std::filesystem::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  DatasetSplits out;
  std::vector<ImagePair> pairs;
  for (std::size_t i = 0; i < files.size(); ++i) {
    torch::Tensor img;
    try {
      img = load_image(files[i], channels);
    } catch (const std::exception& e) {
      out.skipped.push_back(files[i].string() + ": " + e.what());
      continue;
    }
    const auto h = img.size(1), w = img.size(2);
    if (h < patch_size || w < patch_size) {
      out.skipped.push_back(files[i].string() + ": smaller than patch size");
      continue;
    }
    auto gen = make_generator(derive_seed(seed, Stream::data, i));
    auto pick = [&](std::int64_t extent) {
      const auto slots = (extent - patch_size) / kScale + 1;
      return kScale * torch::randint(slots, {1}, gen, torch::kInt64).item<std::int64_t>();
    };
    const auto y0 = pick(h), x0 = pick(w);
    auto patch = img.slice(1, y0, y0 + patch_size).slice(2, x0, x0 + patch_size).contiguous();
    pairs.push_back(make_pair(std::move(patch), files[i].filename().string()));
  }
  if (pairs.empty()) {
    throw ValidationError("no usable images under " + root.string() + " (" + std::to_string(out.skipped.size()) +
                          " skipped)");
  }

  const auto sizes = split_sizes(static_cast<std::int64_t>(pairs.size()), fractions);
  const auto order = epoch_order(static_cast<std::int64_t>(pairs.size()), seed, -1);
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto& p = pairs[static_cast<std::size_t>(order[k])];
    const auto pos = static_cast<std::int64_t>(k);
    if (pos < sizes.train) out.train.push_back(std::move(p));
    else if (pos < sizes.train + sizes.val) out.val.push_back(std::move(p));
    else out.test.push_back(std::move(p));
  }
  return out;
}

// Writes HR/LR PNGs plus a manifest (synth-data output layout).
inline void write_corpus(const std::filesystem::path& dir, const std::vector<ImagePair>& pairs,
                         const nlohmann::json& extra = nlohmann::json::object()) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "hr");
  fs::create_directories(dir / "lr");
  nlohmann::json items = nlohmann::json::array();
  for (const auto& p : pairs) {
    const auto name = p.source_id + ".png";
    save_image(dir / "hr" / name, p.hr);
    save_image(dir / "lr" / name, p.lr);
    items.push_back({{"id", p.source_id}, {"hr", "hr/" + name}, {"lr", "lr/" + name}});
  }
  nlohmann::json manifest = extra;
  manifest["pairs"] = items;
  manifest["scale"] = kScale;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

}  // namespace lcmsr
