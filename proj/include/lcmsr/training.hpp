#pragma once

// Plumbing shared by both training stages: loss CSV logging, per-epoch
// summaries, model-spec metadata and non-finite loss handling.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lcmsr/backbone.hpp"
#include "lcmsr/error.hpp"

namespace lcmsr {

inline nlohmann::json spec_to_json(const ModelSpec& s) {
  return {{"image_channels", s.image_channels}, {"latent_channels", s.latent_channels},
          {"downsample_factor", s.downsample_factor}, {"ae_base_width", s.ae_base_width},
          {"cond_base_width", s.cond_base_width}, {"sr_width", s.sr_width},
          {"num_fru", s.num_fru}, {"imdb_per_fru", s.imdb_per_fru},
          {"unet_base_width", s.unet_base_width}, {"unet_mults", s.unet_mults},
          {"disc_base_width", s.disc_base_width}, {"sr_global_skip", s.sr_global_skip},
          {"unet_prediction", to_string(s.unet_prediction)}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.image_channels = j.at("image_channels");
  s.latent_channels = j.at("latent_channels");
  s.downsample_factor = j.at("downsample_factor");
  s.ae_base_width = j.at("ae_base_width");
  s.cond_base_width = j.at("cond_base_width");
  s.sr_width = j.at("sr_width");
  s.num_fru = j.at("num_fru");
  s.imdb_per_fru = j.at("imdb_per_fru");
  s.unet_base_width = j.at("unet_base_width");
  s.unet_mults = j.at("unet_mults").get<std::vector<std::int64_t>>();
  s.disc_base_width = j.at("disc_base_width");
  s.sr_global_skip = j.at("sr_global_skip");
  s.unet_prediction = parse_prediction(j.value("unet_prediction", std::string("residual")));
  return s;
}

// Mean of each logged component over one epoch.
struct EpochSummary {
  std::int64_t epoch = 0;
  std::int64_t steps = 0;
  std::map<std::string, double> mean;
};

class EpochAccumulator {
 public:
  void add(const std::map<std::string, double>& values) {
    for (const auto& [k, v] : values) sums_[k] += v;
    ++steps_;
  }

  EpochSummary finish(std::int64_t epoch) const {
    EpochSummary s{epoch, steps_, {}};
    for (const auto& [k, v] : sums_) s.mean[k] = v / static_cast<double>(steps_);
    return s;
  }

 private:
  std::map<std::string, double> sums_;
  std::int64_t steps_ = 0;
};

// Appends one row per optimizer step. The header is written when the file is new.
class LossCsv {
 public:
  LossCsv() = default;

  LossCsv(const std::filesystem::path& path, std::vector<std::string> columns) : columns_(std::move(columns)) {
    const bool fresh = !std::filesystem::exists(path);
    out_.open(path, std::ios::app);
    if (!out_) throw IoError("cannot open loss log " + path.string());
    if (fresh) {
      out_ << "step,epoch";
      for (const auto& c : columns_) out_ << "," << c;
      out_ << "\n";
    }
    out_.precision(9);
  }

  void row(std::int64_t step, std::int64_t epoch, const std::map<std::string, double>& values) {
    if (!out_.is_open()) return;
    out_ << step << "," << epoch;
    for (const auto& c : columns_) {
      auto it = values.find(c);
      out_ << "," << (it == values.end() ? 0.0 : it->second);
    }
    out_ << "\n";
    out_.flush();
  }

 private:
  std::vector<std::string> columns_;
  std::ofstream out_;
};

// Aborts training on a non-finite loss, leaving a JSON dump of the state.
inline void check_finite(const std::map<std::string, double>& values, std::int64_t step, std::int64_t epoch,
                         const std::optional<std::filesystem::path>& out_dir) {
  bool ok = true;
  for (const auto& [k, v] : values) ok = ok && std::isfinite(v);
  if (ok) return;
  nlohmann::json dump{{"step", step}, {"epoch", epoch}};
  for (const auto& [k, v] : values) dump["losses"][k] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(std::to_string(v));
  std::string where;
  if (out_dir) {
    const auto path = *out_dir / "nonfinite_dump.json";
    std::ofstream(path) << dump.dump(2) << "\n";
    where = " (state dumped to " + path.string() + ")";
  }
  throw NonFiniteLoss("non-finite loss at step " + std::to_string(step) + ", epoch " + std::to_string(epoch) + ": " +
                      dump.dump() + where);
}

// Indices of each mini-batch for one epoch; the last batch may be short.
inline std::vector<std::vector<std::int64_t>> make_batches(const std::vector<std::int64_t>& order,
                                                           std::int64_t batch_size) {
  std::vector<std::vector<std::int64_t>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace lcmsr
