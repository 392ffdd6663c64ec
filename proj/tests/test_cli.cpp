#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lcmsr/cli.hpp"
#include "support.hpp"

using namespace lcmsr;
using lcmsr::test::TempDir;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

std::size_t count_files(const std::filesystem::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

}  // namespace

TEST(Cli, HelpExitsZero) {
  auto r = run_cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("train-rae"), std::string::npos);
  EXPECT_EQ(run_cli({"eval", "--help"}).code, 0);
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run_cli({}).code, 1);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 1);
  auto r = run_cli({"train-lcd", "--data", "x", "--out", "y"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--rae-ckpt is required"), std::string::npos);
  EXPECT_EQ(run_cli({"synth-data", "--out", "y", "--profile", "medium"}).code, 1);
}

TEST(Cli, ValidationErrorsExitOne) {
  TempDir dir;
  auto r = run_cli({"synth-data", "--out", (dir / "d").string(), "--set", "lcd.k=0"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("lcd.k"), std::string::npos);
  EXPECT_EQ(run_cli({"synth-data", "--out", (dir / "d").string(), "--set", "novalue"}).code, 1);
  EXPECT_EQ(run_cli({"train-rae", "--data", (dir / "missing").string(), "--out", (dir / "r").string()}).code, 2);
}

TEST(Cli, BinaryExitCodes) {
  const std::string exe = LCMSR_CLI_PATH;
  EXPECT_EQ(std::system((exe + " --help > /dev/null").c_str()), 0);
  const int status = std::system((exe + " infer --out /tmp/x > /dev/null 2>&1").c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 1);
}

TEST(Cli, SynthTrainInferEvalBench) {
  TempDir dir;
  const auto data = (dir / "data").string();
  const std::vector<std::string> tiny = {"--profile", "tiny", "--seed", "5"};
  auto with = [&](std::vector<std::string> a) {
    a.insert(a.end(), tiny.begin(), tiny.end());
    return a;
  };

  auto r = run_cli(with({"synth-data", "--out", data, "--n", "10", "--hr-size", "32"}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_files(dir / "data" / "hr", ".png"), 10u);
  EXPECT_EQ(count_files(dir / "data" / "lr", ".png"), 10u);

  const auto rae_out = (dir / "rae").string();
  r = run_cli(with({"train-rae", "--data", data, "--out", rae_out, "--epochs", "1", "--set", "rae.warmup_epochs=0"}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("rae epoch 1"), std::string::npos);
  const auto rae_ckpt = (dir / "rae" / "rae_epoch1.ckpt").string();
  ASSERT_TRUE(std::filesystem::exists(rae_ckpt));
  EXPECT_TRUE(std::filesystem::exists(dir / "rae" / "config.txt"));
  const auto manifest = read_json(dir / "rae" / "data_manifest.json");
  EXPECT_EQ(manifest.at("train").size(), 8u);

  const auto lcd_out = (dir / "lcd").string();
  r = run_cli(with({"train-lcd", "--data", data, "--rae-ckpt", rae_ckpt, "--out", lcd_out, "--epochs", "1"}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lcd_ckpt = (dir / "lcd" / "lcd_epoch1.ckpt").string();
  ASSERT_TRUE(std::filesystem::exists(lcd_ckpt));

  r = run_cli(with({"infer", "--rae-ckpt", rae_ckpt, "--lcd-ckpt", lcd_ckpt, "--input", data + "/lr", "--out",
                    (dir / "sr").string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_files(dir / "sr", ".png"), 10u);
  const auto sr = load_image(dir / "sr" / "synth_00000.png", 3);
  EXPECT_EQ(sr.sizes().vec(), (std::vector<std::int64_t>{3, 32, 32}));

  r = run_cli(with({"eval", "--rae-ckpt", rae_ckpt, "--lcd-ckpt", lcd_ckpt, "--data", data, "--split", "all", "--out",
                    (dir / "eval").string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto metrics = read_json(dir / "eval" / "metrics.json");
  EXPECT_EQ(metrics.at("per_image").size(), 10u);
  EXPECT_EQ(metrics.at("ablation"), "full");
  const auto& agg = metrics.at("aggregate");
  EXPECT_NEAR(agg.at("psnr_gain_db").get<double>(),
              agg.at("psnr_mean").get<double>() - agg.at("psnr_bicubic_mean").get<double>(), 1e-9);

  r = run_cli(with({"eval", "--rae-ckpt", rae_ckpt, "--lcd-ckpt", lcd_ckpt, "--data", data, "--metric", "lpips",
                    "--out", (dir / "eval2").string()}));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("unknown metric 'lpips'"), std::string::npos);

  r = run_cli(with({"bench", "--rae-ckpt", rae_ckpt, "--lcd-ckpt", lcd_ckpt, "--steps", "4", "--repeats", "3", "--out",
                    (dir / "bench").string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto timing = read_json(dir / "bench" / "timing.json");
  EXPECT_EQ(timing.at("variants")[0].at("denoiser_calls"), 1);
  EXPECT_EQ(timing.at("variants")[1].at("denoiser_calls"), 4);
  EXPECT_TRUE(timing.at("environment").contains("hardware"));

  // A stage-2 checkpoint is not a valid stage-1 checkpoint.
  r = run_cli(with({"train-lcd", "--data", data, "--rae-ckpt", lcd_ckpt, "--out", (dir / "bad").string()}));
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, AblationFlagReachesCheckpoint) {
  TempDir dir;
  const auto data = (dir / "data").string();
  ASSERT_EQ(run_cli({"synth-data", "--out", data, "--n", "10", "--hr-size", "32", "--profile", "tiny"}).code, 0);
  ASSERT_EQ(run_cli({"train-rae", "--data", data, "--out", (dir / "rae").string(), "--epochs", "1", "--profile",
                     "tiny"}).code,
            0);
  auto r = run_cli({"train-lcd", "--data", data, "--rae-ckpt", (dir / "rae" / "rae_epoch1.ckpt").string(), "--out",
                    (dir / "lcd").string(), "--epochs", "1", "--ablation", "no_consistency", "--profile", "tiny"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(Checkpoint::load(dir / "lcd" / "lcd_epoch1.ckpt").meta.at("ablation"), "no_consistency");
  EXPECT_EQ(run_cli({"train-lcd", "--data", data, "--rae-ckpt", (dir / "rae" / "rae_epoch1.ckpt").string(), "--out",
                     (dir / "x").string(), "--ablation", "sometimes", "--profile", "tiny"}).code,
            1);
}
