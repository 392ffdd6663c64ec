#pragma once

// Command-line entry point shared by the `lcmsr` executable and the tests.
//
//   lcmsr synth-data --n 16 --hr-size 32 --seed 7 --out data/
//   lcmsr train-rae  --data data/ --out runs/rae --profile tiny
//   lcmsr train-lcd  --data data/ --rae-ckpt runs/rae/rae_epoch30.ckpt --out runs/lcd
//   lcmsr infer      --rae-ckpt ... --lcd-ckpt ... --input lr.png --out sr/
//   lcmsr eval       --rae-ckpt ... --lcd-ckpt ... --data data/ --out report/
//   lcmsr bench      --rae-ckpt ... --lcd-ckpt ... --out bench/
//
// Exit codes: 0 success, 1 validation error (bad flags, bad config), 2 runtime failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "lcmsr/config.hpp"
#include "lcmsr/datapipe.hpp"
#include "lcmsr/eval.hpp"
#include "lcmsr/image_io.hpp"
#include "lcmsr/lcd_stage.hpp"
#include "lcmsr/rae_stage.hpp"
#include "lcmsr/sampler.hpp"

namespace lcmsr::cli {

namespace fs = std::filesystem;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> profile;
  std::string out;
  std::vector<std::string> set;
};

inline void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "Config file (key = value lines)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "Random seed (overrides config)");
  cmd->add_option("--profile", f.profile, "Defaults profile")->check(CLI::IsMember({"full", "tiny"}));
  cmd->add_option("--out", f.out, "Output directory")->required();
  cmd->add_option("--set", f.set, "Extra config override KEY=VALUE (repeatable)");
}

inline Config resolve(const CommonFlags& f, KeyValues overrides) {
  const auto file = f.config.empty() ? KeyValues{} : read_config_file(f.config);
  for (const auto& kv : f.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ValidationError("--set expects KEY=VALUE, got '" + kv + "'");
    overrides[detail::trim(kv.substr(0, eq))] = detail::trim(kv.substr(eq + 1));
  }
  if (f.seed) overrides["seed"] = std::to_string(*f.seed);
  if (f.profile) overrides["profile"] = *f.profile;
  return resolve_config(file, overrides);
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::string prepare_out(const fs::path& out, const Config& cfg) {
  fs::create_directories(out);
  const auto echo = echo_config(cfg);
  write_text(out / "config.txt", echo);
  return echo;
}

// `data` may be an image folder or a synth-data output (which keeps HR images in hr/).
inline DatasetSplits load_splits(const fs::path& data, const Config& cfg, const fs::path& out) {
  const auto root = fs::is_directory(data / "hr") ? data / "hr" : data;
  auto splits = build_dataset(root, cfg.patch_size, cfg.split, cfg.seed, cfg.model.image_channels);
  auto manifest = splits.manifest();
  manifest["root"] = root.string();
  manifest["seed"] = cfg.seed;
  manifest["patch_size"] = cfg.patch_size;
  manifest["fractions"] = {cfg.split.train, cfg.split.val, cfg.split.test};
  write_json(out / "data_manifest.json", manifest);
  return splits;
}

inline const std::vector<ImagePair>& pick_split(const DatasetSplits& s, const std::string& which,
                                                std::vector<ImagePair>& storage) {
  if (which == "train") return s.train;
  if (which == "val") return s.val;
  if (which == "test") return s.test;
  storage = s.train;
  storage.insert(storage.end(), s.val.begin(), s.val.end());
  storage.insert(storage.end(), s.test.begin(), s.test.end());
  return storage;
}

inline std::vector<fs::path> list_images(const fs::path& input) {
  std::vector<fs::path> files;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input)) {
      if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else if (fs::exists(input)) {
    files.push_back(input);
  }
  if (files.empty()) throw ValidationError("no input images at " + input.string());
  return files;
}

inline void log_epoch(std::ostream& out, const char* stage, const EpochSummary& s) {
  out << stage << " epoch " << s.epoch + 1;
  for (const auto& [k, v] : s.mean) out << " " << k << "=" << v;
  out << "\n";
}

inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Single-step latent consistency super-resolution (x4)", "lcmsr"};
  app.require_subcommand(1);

  // synth-data
  CommonFlags synth_flags;
  std::int64_t synth_n = 16, synth_size = 32;
  auto* synth = app.add_subcommand("synth-data", "Write a procedural HR/LR PNG corpus");
  add_common(synth, synth_flags);
  synth->add_option("--n", synth_n, "Number of pairs")->check(CLI::PositiveNumber);
  synth->add_option("--hr-size", synth_size, "HR edge length (multiple of 4)")->check(CLI::PositiveNumber);

  // train-rae
  CommonFlags rae_flags;
  std::string rae_data, rae_resume;
  std::optional<std::int64_t> rae_epochs, rae_batch;
  std::optional<double> rae_lr;
  auto* train_rae_cmd = app.add_subcommand("train-rae", "Stage 1: train the residual autoencoder");
  add_common(train_rae_cmd, rae_flags);
  train_rae_cmd->add_option("--data", rae_data, "Image folder or synth-data directory")->required();
  train_rae_cmd->add_option("--resume", rae_resume, "Resume from a stage-1 checkpoint")->check(CLI::ExistingFile);
  train_rae_cmd->add_option("--epochs", rae_epochs, "Override rae.epochs");
  train_rae_cmd->add_option("--batch-size", rae_batch, "Override rae.batch_size");
  train_rae_cmd->add_option("--lr", rae_lr, "Override rae.lr");

  // train-lcd
  CommonFlags lcd_flags;
  std::string lcd_data, lcd_rae, lcd_resume;
  std::optional<std::string> lcd_ablation;
  std::optional<std::int64_t> lcd_epochs, lcd_batch;
  std::optional<double> lcd_lr;
  auto* train_lcd_cmd = app.add_subcommand("train-lcd", "Stage 2: latent consistency training");
  add_common(train_lcd_cmd, lcd_flags);
  train_lcd_cmd->add_option("--data", lcd_data, "Image folder or synth-data directory")->required();
  train_lcd_cmd->add_option("--rae-ckpt", lcd_rae, "Frozen stage-1 checkpoint")->required()->check(CLI::ExistingFile);
  train_lcd_cmd->add_option("--resume", lcd_resume, "Resume from a stage-2 checkpoint")->check(CLI::ExistingFile);
  train_lcd_cmd->add_option("--ablation", lcd_ablation, "Loss ablation")
      ->check(CLI::IsMember({"full", "no_kd", "no_consistency"}));
  train_lcd_cmd->add_option("--epochs", lcd_epochs, "Override lcd.epochs");
  train_lcd_cmd->add_option("--batch-size", lcd_batch, "Override lcd.batch_size");
  train_lcd_cmd->add_option("--lr", lcd_lr, "Override lcd.lr");

  // infer
  CommonFlags infer_flags;
  std::string infer_rae, infer_lcd, infer_input;
  std::int64_t infer_steps = 0;
  auto* infer = app.add_subcommand("infer", "Super-resolve LR images");
  add_common(infer, infer_flags);
  infer->add_option("--rae-ckpt", infer_rae, "Stage-1 checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--lcd-ckpt", infer_lcd, "Stage-2 checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--input", infer_input, "LR image or folder of LR images")->required();
  infer->add_option("--steps", infer_steps, "0 = single-step consistency sampling, n = n-step ancestral baseline");

  // eval
  CommonFlags eval_flags;
  std::string eval_rae, eval_lcd, eval_data, eval_split = "test";
  std::vector<std::string> eval_metrics;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR report (and plugin metrics) on a dataset split");
  add_common(eval_cmd, eval_flags);
  eval_cmd->add_option("--rae-ckpt", eval_rae, "Stage-1 checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--lcd-ckpt", eval_lcd, "Stage-2 checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_data, "Image folder or synth-data directory")->required();
  eval_cmd->add_option("--split", eval_split, "Split to evaluate")->check(CLI::IsMember({"train", "val", "test", "all"}));
  eval_cmd->add_option("--metric", eval_metrics, "Perceptual metric plugin name (repeatable)");

  // bench
  CommonFlags bench_flags;
  std::string bench_rae, bench_lcd;
  std::optional<std::int64_t> bench_steps, bench_repeats;
  std::int64_t bench_lr_size = 0;
  auto* bench = app.add_subcommand("bench", "Single-step vs ancestral runtime comparison");
  add_common(bench, bench_flags);
  bench->add_option("--rae-ckpt", bench_rae, "Stage-1 checkpoint")->required()->check(CLI::ExistingFile);
  bench->add_option("--lcd-ckpt", bench_lcd, "Stage-2 checkpoint")->required()->check(CLI::ExistingFile);
  bench->add_option("--steps", bench_steps, "Ancestral baseline steps (sample.ancestral_steps)");
  bench->add_option("--repeats", bench_repeats, "Timed repeats (bench.repeats)");
  bench->add_option("--lr-size", bench_lr_size, "LR edge length (default: patch_size / 4)");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (synth->parsed()) {
      const auto cfg = resolve(synth_flags, {});
      const fs::path outdir = synth_flags.out;
      prepare_out(outdir, cfg);
      auto pairs = synth_corpus(synth_n, synth_size, cfg.seed, cfg.model.image_channels);
      write_corpus(outdir, pairs, {{"seed", cfg.seed}, {"hr_size", synth_size}, {"n", synth_n}});
      out << "wrote " << pairs.size() << " pairs to " << outdir.string() << "\n";
      return 0;
    }

    if (train_rae_cmd->parsed()) {
      KeyValues ov;
      if (rae_epochs) ov["rae.epochs"] = std::to_string(*rae_epochs);
      if (rae_batch) ov["rae.batch_size"] = std::to_string(*rae_batch);
      if (rae_lr) ov["rae.lr"] = detail::format_double(*rae_lr);
      const auto cfg = resolve(rae_flags, ov);
      const fs::path outdir = rae_flags.out;
      const auto echo = prepare_out(outdir, cfg);
      const auto splits = load_splits(rae_data, cfg, outdir);
      auto nets = make_rae(cfg.model, cfg.seed);
      RunOptions opt{cfg.seed, outdir, std::nullopt, echo, [&](const EpochSummary& s) { log_epoch(out, "rae", s); }};
      if (!rae_resume.empty()) opt.resume = rae_resume;
      auto result = train_rae(splits.train, nets, cfg.rae, opt);
      if (!result.checkpoints.empty()) out << "checkpoint " << result.checkpoints.back().string() << "\n";
      return 0;
    }

    if (train_lcd_cmd->parsed()) {
      KeyValues ov;
      if (lcd_ablation) ov["lcd.ablation"] = *lcd_ablation;
      if (lcd_epochs) ov["lcd.epochs"] = std::to_string(*lcd_epochs);
      if (lcd_batch) ov["lcd.batch_size"] = std::to_string(*lcd_batch);
      if (lcd_lr) ov["lcd.lr"] = detail::format_double(*lcd_lr);
      const auto cfg = resolve(lcd_flags, ov);
      const fs::path outdir = lcd_flags.out;
      const auto echo = prepare_out(outdir, cfg);
      auto rae = load_rae(lcd_rae);
      check_compatible(rae.spec, cfg.model);
      const auto splits = load_splits(lcd_data, cfg, outdir);
      auto nets = make_lcd(cfg.model, cfg.seed);
      RunOptions opt{cfg.seed, outdir, std::nullopt, echo, [&](const EpochSummary& s) { log_epoch(out, "lcd", s); }};
      if (!lcd_resume.empty()) opt.resume = lcd_resume;
      auto result = train_lcd(splits.train, rae, nets, cfg.lcd, cfg.schedule(), opt);
      if (!result.checkpoints.empty()) out << "checkpoint " << result.checkpoints.back().string() << "\n";
      return 0;
    }

    if (infer->parsed()) {
      const auto cfg = resolve(infer_flags, {});
      const fs::path outdir = infer_flags.out;
      prepare_out(outdir, cfg);
      auto rae = load_rae(infer_rae);
      auto lcd = load_lcd(infer_lcd);
      const auto schedule = cfg.schedule();
      for (const auto& file : list_images(infer_input)) {
        auto lr = load_image(file, rae.spec.image_channels);
        auto sr = infer_steps == 0 ? sample_single_step(lr, lcd, rae, schedule, cfg.seed)
                                   : sample_ancestral(lr, lcd, rae, schedule, infer_steps, cfg.seed);
        const auto dest = outdir / (file.stem().string() + ".png");
        save_image(dest, sr);
        out << file.string() << " -> " << dest.string() << "\n";
      }
      return 0;
    }

    if (eval_cmd->parsed()) {
      const auto cfg = resolve(eval_flags, {});
      const fs::path outdir = eval_flags.out;
      prepare_out(outdir, cfg);
      MetricRegistry registry;
      for (const auto& m : eval_metrics) registry.evaluate(m, torch::zeros({1}), torch::zeros({1}));
      auto rae = load_rae(eval_rae);
      auto lcd = load_lcd(eval_lcd);
      const auto schedule = cfg.schedule();
      const auto splits = load_splits(eval_data, cfg, outdir);
      std::vector<ImagePair> storage;
      const auto& pairs = pick_split(splits, eval_split, storage);
      if (pairs.empty()) throw ValidationError("split '" + eval_split + "' is empty");
      nlohmann::json per_image = nlohmann::json::array();
      double sum = 0.0, sum_bicubic = 0.0;
      for (const auto& p : pairs) {
        auto sr = sample_single_step(p.lr, lcd, rae, schedule, cfg.seed);
        const double v = psnr_8bit(sr, p.hr, cfg.psnr_cap);
        const double vb = psnr_8bit(p.lr_up, p.hr, cfg.psnr_cap);
        nlohmann::json row{{"id", p.source_id}, {"psnr", v}, {"psnr_bicubic", vb}};
        for (const auto& m : eval_metrics) row[m] = registry.evaluate(m, sr, p.hr);
        per_image.push_back(row);
        sum += v;
        sum_bicubic += vb;
      }
      const double n = double(pairs.size());
      nlohmann::json report{{"split", eval_split},
                            {"sampler", "consistency_1step"},
                            {"seed", cfg.seed},
                            {"ablation", Checkpoint::load(eval_lcd).meta.value("ablation", "full")},
                            {"per_image", per_image},
                            {"aggregate",
                             {{"count", pairs.size()},
                              {"psnr_mean", sum / n},
                              {"psnr_bicubic_mean", sum_bicubic / n},
                              {"psnr_gain_db", (sum - sum_bicubic) / n}}},
                            {"plugins", registry.names()}};
      write_json(outdir / "metrics.json", report);
      out << "PSNR " << sum / n << " dB (bicubic " << sum_bicubic / n << " dB) over " << pairs.size() << " images\n";
      return 0;
    }

    if (bench->parsed()) {
      KeyValues ov;
      if (bench_steps) ov["sample.ancestral_steps"] = std::to_string(*bench_steps);
      if (bench_repeats) ov["bench.repeats"] = std::to_string(*bench_repeats);
      const auto cfg = resolve(bench_flags, ov);
      const fs::path outdir = bench_flags.out;
      prepare_out(outdir, cfg);
      auto rae = load_rae(bench_rae);
      auto lcd = load_lcd(bench_lcd);
      const auto schedule = cfg.schedule();
      const auto lr_size = bench_lr_size > 0 ? bench_lr_size : cfg.patch_size / kScale;
      auto gen = make_generator(derive_seed(cfg.seed, Stream::sample, 99));
      auto lr = torch::rand({rae.spec.image_channels, lr_size, lr_size}, gen) * 2.0 - 1.0;
      const auto single = benchmark_runtime(SamplerVariant::single_step(), lr, lcd, rae, schedule, cfg.bench_repeats,
                                            cfg.bench_warmup, cfg.seed);
      const auto multi = benchmark_runtime(SamplerVariant::ancestral(cfg.ancestral_steps), lr, lcd, rae, schedule,
                                           cfg.bench_repeats, cfg.bench_warmup, cfg.seed);
      nlohmann::json report{{"environment",
                             {{"hardware", hardware_descriptor()},
                              {"repeats", cfg.bench_repeats},
                              {"warmup", cfg.bench_warmup},
                              {"lr_shape", {rae.spec.image_channels, lr_size, lr_size}}}},
                            {"variants", {single.to_json(), multi.to_json()}},
                            {"ratio_total", multi.total.mean / single.total.mean},
                            {"ratio_sampling", multi.sampling.mean / single.sampling.mean}};
      write_json(outdir / "timing.json", report);
      out << single.variant << " " << single.total.mean << " s (" << single.denoiser_calls << " calls), "
          << multi.variant << " " << multi.total.mean << " s (" << multi.denoiser_calls << " calls)\n";
      return 0;
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const UnknownMetric& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace lcmsr::cli
