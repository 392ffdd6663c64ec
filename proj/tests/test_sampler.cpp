#include <gtest/gtest.h>

#include "support.hpp"

using namespace lcmsr;
using lcmsr::test::toy_spec;

namespace {

struct Models {
  RaeNetworks rae;
  LcdNetworks lcd;
  NoiseSchedule schedule;
};

Models toy_models() {
  Models m{make_rae(toy_spec(), 1), make_lcd(toy_spec(), 2), make_schedule(1000, 0.0015, 0.0155)};
  lcmsr::test::randomize(*m.lcd.online, 3);
  lcmsr::test::randomize(*m.lcd.cond, 4);
  lcmsr::test::randomize(*m.rae.decoder, 5);
  return m;
}

torch::Tensor lr_image(std::uint64_t seed, std::int64_t size = 4) {
  auto gen = make_generator(seed);
  return torch::rand({3, size, size}, gen, torch::TensorOptions()) * 2 - 1;
}

}  // namespace

TEST(StridedTimesteps, EndpointsAndErrors) {
  EXPECT_EQ(strided_timesteps(1000, 1), (std::vector<std::int64_t>{999}));
  EXPECT_EQ(strided_timesteps(1000, 2), (std::vector<std::int64_t>{999, 0}));
  const auto ts = strided_timesteps(1000, 40);
  ASSERT_EQ(ts.size(), 40u);
  EXPECT_EQ(ts.front(), 999);
  EXPECT_EQ(ts.back(), 0);
  for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_LT(ts[i], ts[i - 1]);
  EXPECT_EQ(strided_timesteps(5, 5), (std::vector<std::int64_t>{4, 3, 2, 1, 0}));
  EXPECT_THROW(strided_timesteps(1000, 0), RangeError);
  EXPECT_THROW(strided_timesteps(1000, 1001), RangeError);
}

TEST(SingleStep, OneDenoiserCallAndShape) {
  auto m = toy_models();
  const auto before = m.lcd.online->calls;
  auto sr = sample_single_step(lr_image(1), m.lcd, m.rae, m.schedule, 7);
  EXPECT_EQ(m.lcd.online->calls - before, 1);
  EXPECT_EQ(sr.sizes().vec(), (std::vector<std::int64_t>{3, 16, 16}));
}

TEST(SingleStep, TinyProfileShape) {
  auto spec = Config::defaults("tiny").model;
  auto rae = make_rae(spec, 1);
  auto lcd = make_lcd(spec, 2);
  auto sched = make_schedule(1000, 0.0015, 0.0155);
  auto sr = sample_single_step(lr_image(2, 16), lcd, rae, sched, 0);
  EXPECT_EQ(sr.sizes().vec(), (std::vector<std::int64_t>{3, 64, 64}));
}

TEST(SingleStep, SeededRunsAreBitIdentical) {
  auto m = toy_models();
  auto lr = lr_image(3);
  auto a = sample_single_step(lr, m.lcd, m.rae, m.schedule, 11);
  auto b = sample_single_step(lr, m.lcd, m.rae, m.schedule, 11);
  auto c = sample_single_step(lr, m.lcd, m.rae, m.schedule, 12);
  EXPECT_TRUE(torch::equal(a, b));
  EXPECT_FALSE(torch::equal(a, c));
}

TEST(SingleStep, OutputIsFiniteForManySeeds) {
  auto m = toy_models();
  auto lr = lr_image(4);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EXPECT_TRUE(torch::isfinite(sample_single_step(lr, m.lcd, m.rae, m.schedule, seed)).all().item<bool>()) << seed;
  }
}

TEST(SingleStep, ConditioningChangesOutput) {
  auto m = toy_models();
  auto a = sample_single_step(lr_image(5), m.lcd, m.rae, m.schedule, 3);
  auto b = sample_single_step(lr_image(6), m.lcd, m.rae, m.schedule, 3);
  EXPECT_GT((a - b).abs().mean().item<double>(), 0.0);
}

TEST(SingleStep, BatchedEqualsPerImage) {
  auto m = toy_models();
  auto lr = torch::stack({lr_image(7), lr_image(8)});
  const auto before = m.lcd.online->calls;
  auto batched = sample_single_step(lr, m.lcd, m.rae, m.schedule, 1);
  EXPECT_EQ(m.lcd.online->calls - before, 1);
  EXPECT_EQ(batched.sizes().vec(), (std::vector<std::int64_t>{2, 3, 16, 16}));
}

TEST(SingleStep, ShapeErrors) {
  auto m = toy_models();
  EXPECT_THROW(sample_single_step(torch::zeros({3, 4}), m.lcd, m.rae, m.schedule, 0), ShapeError);
  // The full model downsamples by 8; a 5x5 LR gives a 20x20 image it cannot tile.
  ModelSpec spec;
  auto rae = make_rae(spec, 1);
  auto lcd = make_lcd(spec, 2);
  EXPECT_THROW(sample_single_step(torch::zeros({3, 5, 5}), lcd, rae, m.schedule, 0), ShapeError);
}

TEST(Ancestral, CallCountEqualsSteps) {
  auto m = toy_models();
  auto lr = lr_image(9);
  for (std::int64_t n : {1, 2, 40}) {
    const auto before = m.lcd.online->calls;
    auto sr = sample_ancestral(lr, m.lcd, m.rae, m.schedule, n, 1);
    EXPECT_EQ(m.lcd.online->calls - before, n);
    EXPECT_TRUE(torch::isfinite(sr).all().item<bool>());
  }
  EXPECT_THROW(sample_ancestral(lr, m.lcd, m.rae, m.schedule, 0, 1), RangeError);
  EXPECT_THROW(sample_ancestral(lr, m.lcd, m.rae, m.schedule, 1001, 1), RangeError);
}

TEST(Ancestral, Deterministic) {
  auto m = toy_models();
  auto lr = lr_image(10);
  EXPECT_TRUE(torch::equal(sample_ancestral(lr, m.lcd, m.rae, m.schedule, 5, 2),
                           sample_ancestral(lr, m.lcd, m.rae, m.schedule, 5, 2)));
}

TEST(Sampler, PhaseTimesAreRecorded) {
  auto m = toy_models();
  PhaseTimes times;
  sample_single_step(lr_image(11), m.lcd, m.rae, m.schedule, 0, &times);
  EXPECT_GT(times.cond, 0.0);
  EXPECT_GT(times.sampling, 0.0);
  EXPECT_GT(times.decode, 0.0);
  EXPECT_DOUBLE_EQ(times.total(), times.cond + times.sampling + times.decode);
}
