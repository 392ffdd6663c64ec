#pragma once

// Run configuration. The file format is flat `key = value` text with dotted
// section prefixes (`schedule.T = 1000`); `#` starts a comment. Resolution order
// is profile defaults < config file < command-line overrides, and the resolved
// configuration can be echoed back in the same format.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lcmsr/backbone.hpp"
#include "lcmsr/datapipe.hpp"
#include "lcmsr/error.hpp"
#include "lcmsr/schedule.hpp"

namespace lcmsr {

enum class Ablation { full, no_kd, no_consistency };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_kd: return "no_kd";
    case Ablation::no_consistency: return "no_consistency";
  }
  return "full";
}

inline Ablation parse_ablation(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "no_kd") return Ablation::no_kd;
  if (s == "no_consistency") return Ablation::no_consistency;
  throw ValidationError("unknown ablation mode '" + s + "' (expected full, no_kd or no_consistency)");
}

struct RaeLossWeights {
  double w_l1 = 1.0;
  double w_adv = 0.5;
  double w_reg = 1.0e-6;
  std::int64_t warmup_epochs = 50;

  void validate() const {
    if (w_l1 < 0 || w_adv < 0 || w_reg < 0) throw ValidationError("loss weights must be non-negative");
    if (warmup_epochs < 0) throw ValidationError("rae.warmup_epochs must be non-negative");
  }
};

struct RaeTrainConfig {
  std::int64_t epochs = 200;
  std::int64_t batch_size = 8;
  double lr = 3.6e-5;
  double disc_lr = 3.6e-5;
  RaeLossWeights weights;
  std::int64_t checkpoint_every = 10;
};

struct ConsistencyConfig {
  std::int64_t k = 20;
  double mu = 0.95;
  double lambda_ct = 1.0;
  double lambda_kd = 1.0;
  Ablation ablation = Ablation::full;

  void validate(std::int64_t total_steps) const {
    if (k < 1 || k > total_steps - 1) throw ValidationError("lcd.k must lie in [1, T-1]");
    if (!(mu >= 0.0 && mu <= 1.0)) throw ValidationError("lcd.mu must lie in [0, 1]");
    if (lambda_ct < 0 || lambda_kd < 0) throw ValidationError("loss weights must be non-negative");
  }
};

struct LcdTrainConfig {
  std::int64_t epochs = 200;
  std::int64_t batch_size = 16;
  double lr = 8e-5;
  ConsistencyConfig consistency;
  std::int64_t checkpoint_every = 10;
};

struct Config {
  std::string profile = "full";
  std::uint64_t seed = 0;

  std::int64_t steps = 1000;
  double beta_start = 0.0015;
  double beta_end = 0.0155;
  double sigma_data = 0.5;
  double timestep_scale = 1.0;

  ModelSpec model;

  std::int64_t patch_size = 128;
  SplitFractions split;

  RaeTrainConfig rae;
  LcdTrainConfig lcd;

  std::int64_t ancestral_steps = 40;
  double psnr_cap = 100.0;
  std::int64_t bench_repeats = 5;
  std::int64_t bench_warmup = 1;

  NoiseSchedule schedule() const { return make_schedule(steps, beta_start, beta_end, sigma_data, timestep_scale); }

  static Config defaults(const std::string& profile) {
    Config c;
    if (profile == "full") return c;
    if (profile != "tiny") throw ValidationError("unknown profile '" + profile + "' (expected full or tiny)");
    c.profile = "tiny";
    c.model.downsample_factor = 2;
    c.model.latent_channels = 16;
    c.model.imdb_per_fru = 2;
    c.model.ae_base_width = 32;
    c.model.cond_base_width = 32;
    c.model.sr_width = 32;
    c.model.unet_base_width = 32;
    c.model.disc_base_width = 32;
    c.patch_size = 32;
    c.rae.epochs = 30;
    c.rae.batch_size = 4;
    c.rae.lr = 5e-4;
    c.rae.disc_lr = 5e-4;
    c.rae.weights.w_adv = 0.01;
    c.rae.weights.warmup_epochs = 20;
    c.rae.checkpoint_every = 10;
    c.lcd.epochs = 50;
    c.lcd.batch_size = 4;
    c.lcd.lr = 1e-3;
    c.lcd.checkpoint_every = 10;
    return c;
  }

  void validate() const {
    if (steps < 2) throw ValidationError("schedule.T must be >= 2");
    if (!(beta_start > 0 && beta_start < beta_end && beta_end < 1)) {
      throw ValidationError("schedule requires 0 < beta_start < beta_end < 1");
    }
    if (!(sigma_data > 0)) throw ValidationError("schedule.sigma_data must be positive");
    if (!(timestep_scale > 0)) throw ValidationError("schedule.timestep_scale must be positive");
    model.validate();
    if (patch_size % kScale != 0 || patch_size % model.downsample_factor != 0) {
      throw ValidationError("data.patch_size must be divisible by 4 and by model.downsample_factor");
    }
    split_sizes(10, split);
    if (rae.epochs < 0 || lcd.epochs < 0) throw ValidationError("epochs must be non-negative");
    if (rae.batch_size < 1 || lcd.batch_size < 1) throw ValidationError("batch sizes must be >= 1");
    if (!(rae.lr > 0) || !(rae.disc_lr > 0) || !(lcd.lr > 0)) throw ValidationError("learning rates must be positive");
    if (rae.checkpoint_every < 1 || lcd.checkpoint_every < 1) throw ValidationError("checkpoint_every must be >= 1");
    rae.weights.validate();
    lcd.consistency.validate(steps);
    if (ancestral_steps < 1 || ancestral_steps > steps) throw ValidationError("sample.ancestral_steps must lie in [1, T]");
    if (!(psnr_cap > 0)) throw ValidationError("eval.psnr_cap must be positive");
    if (bench_repeats < 3) throw ValidationError("bench.repeats must be >= 3");
    if (bench_warmup < 0) throw ValidationError("bench.warmup must be >= 0");
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto s = trim(text);
  auto res = std::from_chars(s.data(), s.data() + s.size(), value);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ValidationError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  const auto s = trim(text);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ValidationError("config key '" + key + "': expected true/false, got '" + text + "'");
}

struct Field {
  std::string key;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

template <class T>
Field int_field(std::string key, T Config::*group, std::int64_t T::*member) {
  return {key, [=](const Config& c) { return std::to_string((c.*group).*member); },
          [=](Config& c, const std::string& v) { (c.*group).*member = parse_number<std::int64_t>(key, v); }};
}

inline Field int_field(std::string key, std::int64_t Config::*member) {
  return {key, [=](const Config& c) { return std::to_string(c.*member); },
          [=](Config& c, const std::string& v) { c.*member = parse_number<std::int64_t>(key, v); }};
}

template <class T>
Field double_field(std::string key, T Config::*group, double T::*member) {
  return {key, [=](const Config& c) { return format_double((c.*group).*member); },
          [=](Config& c, const std::string& v) { (c.*group).*member = parse_number<double>(key, v); }};
}

inline Field double_field(std::string key, double Config::*member) {
  return {key, [=](const Config& c) { return format_double(c.*member); },
          [=](Config& c, const std::string& v) { c.*member = parse_number<double>(key, v); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back({"profile", [](const Config& c) { return c.profile; },
                 [](Config& c, const std::string& v) { c.profile = trim(v); }});
    f.push_back({"seed", [](const Config& c) { return std::to_string(c.seed); },
                 [](Config& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); }});
    f.push_back(int_field("schedule.T", &Config::steps));
    f.push_back(double_field("schedule.beta_start", &Config::beta_start));
    f.push_back(double_field("schedule.beta_end", &Config::beta_end));
    f.push_back(double_field("schedule.sigma_data", &Config::sigma_data));
    f.push_back(double_field("schedule.timestep_scale", &Config::timestep_scale));
    f.push_back(int_field("model.image_channels", &Config::model, &ModelSpec::image_channels));
    f.push_back(int_field("model.latent_channels", &Config::model, &ModelSpec::latent_channels));
    f.push_back(int_field("model.downsample_factor", &Config::model, &ModelSpec::downsample_factor));
    f.push_back(int_field("model.ae_base_width", &Config::model, &ModelSpec::ae_base_width));
    f.push_back(int_field("model.cond_base_width", &Config::model, &ModelSpec::cond_base_width));
    f.push_back(int_field("model.sr_width", &Config::model, &ModelSpec::sr_width));
    f.push_back(int_field("model.num_fru", &Config::model, &ModelSpec::num_fru));
    f.push_back(int_field("model.imdb_per_fru", &Config::model, &ModelSpec::imdb_per_fru));
    f.push_back(int_field("model.unet_base_width", &Config::model, &ModelSpec::unet_base_width));
    f.push_back({"model.unet_mults",
                 [](const Config& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.model.unet_mults.size(); ++i) {
                     if (i) s += ",";
                     s += std::to_string(c.model.unet_mults[i]);
                   }
                   return s;
                 },
                 [](Config& c, const std::string& v) {
                   std::vector<std::int64_t> out;
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) out.push_back(parse_number<std::int64_t>("model.unet_mults", item));
                   c.model.unet_mults = out;
                 }});
    f.push_back(int_field("model.disc_base_width", &Config::model, &ModelSpec::disc_base_width));
    f.push_back({"model.sr_global_skip", [](const Config& c) { return std::string(c.model.sr_global_skip ? "true" : "false"); },
                 [](Config& c, const std::string& v) { c.model.sr_global_skip = parse_bool("model.sr_global_skip", v); }});
    f.push_back({"model.unet_prediction", [](const Config& c) { return to_string(c.model.unet_prediction); },
                 [](Config& c, const std::string& v) { c.model.unet_prediction = parse_prediction(v); }});
    f.push_back(int_field("data.patch_size", &Config::patch_size));
    f.push_back(double_field("data.split_train", &Config::split, &SplitFractions::train));
    f.push_back(double_field("data.split_val", &Config::split, &SplitFractions::val));
    f.push_back(double_field("data.split_test", &Config::split, &SplitFractions::test));
    f.push_back(int_field("rae.epochs", &Config::rae, &RaeTrainConfig::epochs));
    f.push_back(int_field("rae.batch_size", &Config::rae, &RaeTrainConfig::batch_size));
    f.push_back(double_field("rae.lr", &Config::rae, &RaeTrainConfig::lr));
    f.push_back(double_field("rae.disc_lr", &Config::rae, &RaeTrainConfig::disc_lr));
    f.push_back({"rae.w_l1", [](const Config& c) { return format_double(c.rae.weights.w_l1); },
                 [](Config& c, const std::string& v) { c.rae.weights.w_l1 = parse_number<double>("rae.w_l1", v); }});
    f.push_back({"rae.w_adv", [](const Config& c) { return format_double(c.rae.weights.w_adv); },
                 [](Config& c, const std::string& v) { c.rae.weights.w_adv = parse_number<double>("rae.w_adv", v); }});
    f.push_back({"rae.w_reg", [](const Config& c) { return format_double(c.rae.weights.w_reg); },
                 [](Config& c, const std::string& v) { c.rae.weights.w_reg = parse_number<double>("rae.w_reg", v); }});
    f.push_back({"rae.warmup_epochs", [](const Config& c) { return std::to_string(c.rae.weights.warmup_epochs); },
                 [](Config& c, const std::string& v) {
                   c.rae.weights.warmup_epochs = parse_number<std::int64_t>("rae.warmup_epochs", v);
                 }});
    f.push_back(int_field("rae.checkpoint_every", &Config::rae, &RaeTrainConfig::checkpoint_every));
    f.push_back(int_field("lcd.epochs", &Config::lcd, &LcdTrainConfig::epochs));
    f.push_back(int_field("lcd.batch_size", &Config::lcd, &LcdTrainConfig::batch_size));
    f.push_back(double_field("lcd.lr", &Config::lcd, &LcdTrainConfig::lr));
    f.push_back({"lcd.k", [](const Config& c) { return std::to_string(c.lcd.consistency.k); },
                 [](Config& c, const std::string& v) { c.lcd.consistency.k = parse_number<std::int64_t>("lcd.k", v); }});
    f.push_back({"lcd.mu", [](const Config& c) { return format_double(c.lcd.consistency.mu); },
                 [](Config& c, const std::string& v) { c.lcd.consistency.mu = parse_number<double>("lcd.mu", v); }});
    f.push_back({"lcd.lambda_ct", [](const Config& c) { return format_double(c.lcd.consistency.lambda_ct); },
                 [](Config& c, const std::string& v) {
                   c.lcd.consistency.lambda_ct = parse_number<double>("lcd.lambda_ct", v);
                 }});
    f.push_back({"lcd.lambda_kd", [](const Config& c) { return format_double(c.lcd.consistency.lambda_kd); },
                 [](Config& c, const std::string& v) {
                   c.lcd.consistency.lambda_kd = parse_number<double>("lcd.lambda_kd", v);
                 }});
    f.push_back({"lcd.ablation", [](const Config& c) { return to_string(c.lcd.consistency.ablation); },
                 [](Config& c, const std::string& v) { c.lcd.consistency.ablation = parse_ablation(trim(v)); }});
    f.push_back(int_field("lcd.checkpoint_every", &Config::lcd, &LcdTrainConfig::checkpoint_every));
    f.push_back(int_field("sample.ancestral_steps", &Config::ancestral_steps));
    f.push_back(double_field("eval.psnr_cap", &Config::psnr_cap));
    f.push_back(int_field("bench.repeats", &Config::bench_repeats));
    f.push_back(int_field("bench.warmup", &Config::bench_warmup));
    return f;
  }();
  return all;
}

}  // namespace detail

using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_config_text(const std::string& text, const std::string& origin = "config") {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
  }
  return kv;
}

inline KeyValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

inline void apply(Config& cfg, const KeyValues& kv) {
  const auto& fs = detail::fields();
  for (const auto& [key, value] : kv) {
    auto it = std::find_if(fs.begin(), fs.end(), [&](const detail::Field& f) { return f.key == key; });
    if (it == fs.end()) throw ValidationError("unknown config key '" + key + "'");
    if (key == "profile") continue;
    it->set(cfg, value);
  }
}

// Defaults for the selected profile, then file values, then overrides.
inline Config resolve_config(const KeyValues& file, const KeyValues& overrides) {
  std::string profile = "full";
  if (auto it = file.find("profile"); it != file.end()) profile = it->second;
  if (auto it = overrides.find("profile"); it != overrides.end()) profile = it->second;
  auto cfg = Config::defaults(profile);
  apply(cfg, file);
  apply(cfg, overrides);
  cfg.validate();
  return cfg;
}

inline std::string echo_config(const Config& cfg) {
  std::string out;
  for (const auto& f : detail::fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : detail::fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace lcmsr
