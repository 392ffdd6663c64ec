#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace lcmsr;
using lcmsr::test::TempDir;
using lcmsr::test::toy_spec;

namespace {

RaeTrainConfig toy_train_config() {
  RaeTrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 2;
  cfg.lr = 1e-3;
  cfg.disc_lr = 1e-3;
  cfg.weights.warmup_epochs = 1;
  cfg.checkpoint_every = 2;
  return cfg;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST(KlRegularizer, ZeroAtStandardNormal) {
  auto m = torch::zeros({3, 2, 4, 4}, torch::kFloat64);
  EXPECT_EQ(kl_standard_normal(m, torch::zeros_like(m)).item<double>(), 0.0);
}

TEST(KlRegularizer, ClosedForm) {
  auto m = torch::tensor({0.5, -1.0}, torch::kFloat64).view({2, 1});
  auto lv = torch::tensor({0.2, -0.3}, torch::kFloat64).view({2, 1});
  const double e0 = 0.25 + std::exp(0.2) - 1.0 - 0.2;
  const double e1 = 1.0 + std::exp(-0.3) - 1.0 + 0.3;
  EXPECT_NEAR(kl_standard_normal(m, lv).item<double>(), 0.5 * (e0 + e1) / 2.0, 1e-15);
}

TEST(RaeLoss, WarmupGatingIsExact) {
  auto nets = make_rae(toy_spec(), 1);
  nets.to(torch::kFloat64);
  lcmsr::test::randomize(*nets.encoder, 2);
  lcmsr::test::randomize(*nets.decoder, 3);
  auto batch = lcmsr::test::toy_batch(2, 16, 4, torch::kFloat64);
  RaeLossWeights w;
  w.warmup_epochs = 3;
  GeneratorNoise noise(5);
  auto losses = rae_loss(batch, nets, w, 2, noise);
  EXPECT_FALSE(losses.adversarial_active());
  EXPECT_FALSE(losses.reg.defined());
  EXPECT_EQ(losses.total.item<double>(), losses.l1.item<double>());
  losses.total.backward();
  // Discriminator receives no gradient at all during warmup.
  for (const auto& e : nets.disc_params()) {
    EXPECT_TRUE(!e.tensor.grad().defined() || e.tensor.grad().abs().max().item<double>() == 0.0) << e.path;
  }
  EXPECT_EQ(losses.values().count("adv"), 0u);
}

TEST(RaeLoss, DecompositionAfterWarmup) {
  auto nets = make_rae(toy_spec(), 1);
  nets.to(torch::kFloat64);
  lcmsr::test::randomize(*nets.encoder, 2);
  lcmsr::test::randomize(*nets.decoder, 3);
  lcmsr::test::randomize(*nets.disc, 4);
  auto batch = lcmsr::test::toy_batch(2, 16, 4, torch::kFloat64);
  RaeLossWeights w;
  w.warmup_epochs = 3;
  GeneratorNoise noise(5);
  auto losses = rae_loss(batch, nets, w, 3, noise);
  ASSERT_TRUE(losses.adversarial_active());
  const auto v = losses.values();
  const double expected = w.w_l1 * v.at("l1") + w.w_adv * v.at("adv") + w.w_reg * v.at("reg");
  EXPECT_NEAR(v.at("total"), expected, 1e-6 * std::max(1.0, std::abs(expected)));
}

TEST(RaeLoss, FiniteDifferenceGradients) {
  auto nets = make_rae(toy_spec(), 1);
  nets.to(torch::kFloat64);
  lcmsr::test::randomize(*nets.encoder, 2);
  lcmsr::test::randomize(*nets.decoder, 3);
  lcmsr::test::randomize(*nets.disc, 4);
  auto batch = lcmsr::test::toy_batch(2, 8, 6, torch::kFloat64);
  RaeLossWeights w;
  w.warmup_epochs = 0;
  w.w_reg = 1e-2;  // large enough that the KL term visibly contributes
  auto loss = [&] {
    GeneratorNoise noise(7);  // same eps for every evaluation
    return rae_loss(batch, nets, w, 0, noise).total;
  };
  auto gen = nets.generator_params();
  loss().backward();
  auto result = lcmsr::test::check_gradients(gen, [&] { return loss().item<double>(); }, 1e-6, 1e-5);
  EXPECT_EQ(result.checked, gen.count());
  EXPECT_LT(result.worst_rel, 1e-3) << result.worst_path;
}

TEST(DiscLoss, FiniteDifferenceGradients) {
  auto nets = make_rae(toy_spec(), 1);
  nets.to(torch::kFloat64);
  lcmsr::test::randomize(*nets.disc, 4, 2.0);
  auto batch = lcmsr::test::toy_batch(2, 16, 6, torch::kFloat64);
  auto fake = batch.lr_up;
  auto loss = [&] { return disc_loss(batch.hr, fake, nets); };
  auto params = nets.disc_params();
  loss().backward();
  auto result = lcmsr::test::check_gradients(params, [&] { return loss().item<double>(); }, 1e-6, 1e-5);
  EXPECT_LT(result.worst_rel, 1e-3) << result.worst_path;
}

TEST(TrainRae, EmptyDatasetRejected) {
  auto nets = make_rae(toy_spec(), 1);
  EXPECT_THROW(train_rae({}, nets, toy_train_config()), ValidationError);
}

TEST(TrainRae, DiscriminatorUntouchedDuringWarmup) {
  auto nets = make_rae(toy_spec(), 1);
  auto before = nets.disc_params().snapshot();
  auto gen_before = nets.generator_params().snapshot();
  auto cfg = toy_train_config();
  cfg.epochs = 1;
  cfg.weights.warmup_epochs = 1;
  train_rae(synth_corpus(4, 16, 2), nets, cfg);
  EXPECT_TRUE(nets.disc_params().bit_equal(before));
  EXPECT_FALSE(nets.generator_params().bit_equal(gen_before));
}

TEST(TrainRae, LossCsvAndCheckpoints) {
  TempDir dir;
  auto nets = make_rae(toy_spec(), 1);
  RunOptions opt;
  opt.seed = 3;
  opt.out_dir = dir.path();
  opt.config_echo = "seed = 3\n";
  auto result = train_rae(synth_corpus(4, 16, 2), nets, toy_train_config(), opt);
  ASSERT_EQ(result.checkpoints.size(), 2u);
  EXPECT_EQ(result.checkpoints[0].filename(), "rae_epoch2.ckpt");
  EXPECT_EQ(result.checkpoints[1].filename(), "rae_epoch4.ckpt");
  const auto lines = read_lines(dir / "rae_loss.csv");
  ASSERT_EQ(lines.size(), 1u + 8u);
  EXPECT_EQ(lines[0], "step,epoch,l1,adv,reg,total");
  auto ck = Checkpoint::load(dir / "rae_epoch4.ckpt");
  EXPECT_EQ(ck.meta.at("kind"), "rae");
  EXPECT_EQ(ck.meta.at("epoch"), 4);
  EXPECT_EQ(ck.meta.at("global_step"), 8);
  EXPECT_EQ(ck.meta.at("config"), "seed = 3\n");
  auto loaded = load_rae(dir / "rae_epoch4.ckpt");
  EXPECT_TRUE(loaded.all_params().bit_equal(nets.all_params()));
}

TEST(TrainRae, ResumeMatchesUninterruptedRun) {
  const auto data = synth_corpus(4, 16, 2);
  const auto cfg = toy_train_config();

  TempDir straight_dir;
  auto straight = make_rae(toy_spec(), 1);
  RunOptions opt;
  opt.seed = 9;
  opt.out_dir = straight_dir.path();
  auto full = train_rae(data, straight, cfg, opt);

  TempDir split_dir;
  auto first = make_rae(toy_spec(), 1);
  auto half_cfg = cfg;
  half_cfg.epochs = 2;
  RunOptions opt1 = opt;
  opt1.out_dir = split_dir.path();
  train_rae(data, first, half_cfg, opt1);

  auto resumed = make_rae(toy_spec(), 77);  // different init; everything comes from the checkpoint
  RunOptions opt2 = opt1;
  opt2.resume = split_dir / "rae_epoch2.ckpt";
  auto tail = train_rae(data, resumed, cfg, opt2);

  ASSERT_EQ(tail.steps.size(), 4u);
  for (std::size_t i = 0; i < tail.steps.size(); ++i) EXPECT_EQ(tail.steps[i], full.steps[4 + i]) << "step " << i;
  EXPECT_TRUE(resumed.all_params().bit_equal(straight.all_params()));
  EXPECT_EQ(tail.global_step, full.global_step);
}

TEST(TrainRae, NonFiniteLossAborts) {
  TempDir dir;
  auto nets = make_rae(toy_spec(), 1);
  {
    torch::NoGradGuard ng;
    nets.decoder->upsampler->bias.fill_(std::numeric_limits<float>::quiet_NaN());
  }
  RunOptions opt;
  opt.out_dir = dir.path();
  EXPECT_THROW(train_rae(synth_corpus(2, 16, 2), nets, toy_train_config(), opt), NonFiniteLoss);
  EXPECT_TRUE(std::filesystem::exists(dir / "nonfinite_dump.json"));
}

TEST(RaeLoss, DefaultWarmupSwitchesAtEpochFifty) {
  auto nets = make_rae(toy_spec(), 1);
  auto batch = lcmsr::test::toy_batch(1, 16, 4, torch::kFloat32);
  const RaeLossWeights w;
  GeneratorNoise a(1), b(1);
  torch::NoGradGuard ng;
  const auto before = rae_loss(batch, nets, w, 49, a).values();
  const auto after = rae_loss(batch, nets, w, 50, b).values();
  EXPECT_EQ(before.size(), 2u);
  EXPECT_EQ(after.count("adv") + after.count("reg"), 2u);
  EXPECT_EQ(before.at("l1"), after.at("l1"));
}
