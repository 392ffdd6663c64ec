#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace lcmsr;

TEST(ConfigDefaults, FullProfile) {
  const auto c = Config::defaults("full");
  EXPECT_EQ(c.steps, 1000);
  EXPECT_EQ(c.beta_start, 0.0015);
  EXPECT_EQ(c.beta_end, 0.0155);
  EXPECT_EQ(c.rae.epochs, 200);
  EXPECT_EQ(c.rae.batch_size, 8);
  EXPECT_EQ(c.rae.lr, 3.6e-5);
  EXPECT_EQ(c.lcd.epochs, 200);
  EXPECT_EQ(c.lcd.batch_size, 16);
  EXPECT_EQ(c.lcd.lr, 8e-5);
  EXPECT_EQ(c.lcd.consistency.k, 20);
  EXPECT_EQ(c.lcd.consistency.mu, 0.95);
  EXPECT_EQ(c.ancestral_steps, 40);
  EXPECT_NO_THROW(c.validate());
}

TEST(ConfigDefaults, TinyProfile) {
  const auto c = Config::defaults("tiny");
  EXPECT_EQ(c.profile, "tiny");
  EXPECT_EQ(c.patch_size, 32);
  EXPECT_EQ(c.rae.epochs, 30);
  EXPECT_EQ(c.lcd.epochs, 50);
  EXPECT_NO_THROW(c.validate());
  EXPECT_THROW(Config::defaults("huge"), ValidationError);
}

TEST(ConfigText, ParsesCommentsAndWhitespace) {
  const auto kv = parse_config_text("# header\n seed = 7  # trailing\n\nlcd.k=5\r\n");
  EXPECT_EQ(kv.size(), 2u);
  EXPECT_EQ(kv.at("seed"), "7");
  EXPECT_EQ(kv.at("lcd.k"), "5");
}

TEST(ConfigText, ReportsLineOfBadEntry) {
  try {
    parse_config_text("seed = 1\nnot a pair\n", "cfg.txt");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("cfg.txt:2"), std::string::npos);
  }
}

TEST(ConfigResolve, OverridesBeatFileBeatProfile) {
  const KeyValues file{{"profile", "tiny"}, {"seed", "3"}, {"lcd.k", "10"}};
  const KeyValues over{{"lcd.k", "12"}};
  const auto c = resolve_config(file, over);
  EXPECT_EQ(c.profile, "tiny");
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.lcd.consistency.k, 12);
  EXPECT_EQ(c.patch_size, 32);
  EXPECT_EQ(resolve_config(file, {{"profile", "full"}}).patch_size, 128);
}

TEST(ConfigResolve, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(resolve_config({{"lcd.kk", "1"}}, {}), ValidationError);
  EXPECT_THROW(resolve_config({{"lcd.k", "abc"}}, {}), ValidationError);
  EXPECT_THROW(resolve_config({{"lcd.k", "5x"}}, {}), ValidationError);
  EXPECT_THROW(resolve_config({{"lcd.k", "1000"}}, {}), ValidationError);
  EXPECT_THROW(resolve_config({{"lcd.mu", "1.5"}}, {}), ValidationError);
  EXPECT_THROW(resolve_config({{"lcd.ablation", "none"}}, {}), ValidationError);
  EXPECT_THROW(resolve_config({{"model.sr_global_skip", "maybe"}}, {}), ValidationError);
  EXPECT_THROW(resolve_config({{"model.unet_prediction", "v"}}, {}), ValidationError);
  EXPECT_THROW(resolve_config({{"schedule.beta_end", "0.001"}}, {}), ValidationError);
  EXPECT_THROW(resolve_config({{"data.patch_size", "30"}}, {}), ValidationError);
  EXPECT_THROW(resolve_config({{"bench.repeats", "2"}}, {}), ValidationError);
  EXPECT_THROW(resolve_config({{"sample.ancestral_steps", "0"}}, {}), ValidationError);
}

TEST(ConfigEcho, RoundTripsEveryKey) {
  auto c = resolve_config({{"profile", "tiny"}},
                          {{"seed", "42"}, {"lcd.lr", "0.000123"}, {"model.unet_mults", "1,2"},
                           {"lcd.ablation", "no_kd"}, {"model.unet_prediction", "eps"}});
  const auto echo = echo_config(c);
  const auto again = resolve_config(parse_config_text(echo), {});
  EXPECT_EQ(echo_config(again), echo);
  EXPECT_EQ(again.lcd.lr, 0.000123);
  EXPECT_EQ(again.model.unet_mults, (std::vector<std::int64_t>{1, 2}));
  EXPECT_EQ(again.lcd.consistency.ablation, Ablation::no_kd);
  EXPECT_EQ(again.model.unet_prediction, Prediction::eps);
  const auto keys = config_keys();
  std::size_t lines = std::count(echo.begin(), echo.end(), '\n');
  EXPECT_EQ(lines, keys.size());
}

TEST(ConfigFile, MissingFileIsValidationError) {
  EXPECT_THROW(read_config_file("/nonexistent/lcmsr.cfg"), ValidationError);
  lcmsr::test::TempDir dir;
  std::ofstream(dir / "c.cfg") << "seed = 9\n";
  EXPECT_EQ(read_config_file(dir / "c.cfg").at("seed"), "9");
}

TEST(ConfigEnums, AblationAndPrediction) {
  for (auto a : {Ablation::full, Ablation::no_kd, Ablation::no_consistency}) EXPECT_EQ(parse_ablation(to_string(a)), a);
  for (auto p : {Prediction::eps, Prediction::sample, Prediction::residual}) {
    EXPECT_EQ(parse_prediction(to_string(p)), p);
  }
  EXPECT_THROW(parse_ablation("w/o kd"), ValidationError);
}
