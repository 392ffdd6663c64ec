#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace lcmsr;
using lcmsr::test::TempDir;

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  Checkpoint ck;
  ck.meta = {{"kind", "demo"}, {"epoch", 3}};
  auto a = torch::randn({3, 4}, torch::kFloat64);
  auto b = torch::randn({5}, torch::kFloat32);
  auto c = torch::tensor({7, -2}, torch::kInt64);
  ck.put("a", a);
  ck.put("nested/b", b);
  ck.put("c", c);
  ck.save(dir / "x.ckpt");
  auto back = Checkpoint::load(dir / "x.ckpt");
  EXPECT_EQ(back.meta.at("kind"), "demo");
  EXPECT_EQ(back.meta.at("format_version"), kCheckpointVersion);
  EXPECT_TRUE(torch::equal(back.at("a"), a));
  EXPECT_TRUE(torch::equal(back.at("nested/b"), b));
  EXPECT_TRUE(torch::equal(back.at("c"), c));
  EXPECT_EQ(back.names(), (std::vector<std::string>{"a", "nested/b", "c"}));
  EXPECT_FALSE(std::filesystem::exists(dir / "x.ckpt.tmp"));
}

TEST(Checkpoint, RestoresParameterSet) {
  TempDir dir;
  auto spec = lcmsr::test::toy_spec();
  auto a = make_rae(spec, 1);
  auto b = make_rae(spec, 2);
  Checkpoint ck;
  ck.put(a.all_params());
  ck.save(dir / "p.ckpt");
  Checkpoint::load(dir / "p.ckpt").restore(b.all_params());
  EXPECT_TRUE(a.all_params().bit_equal(b.all_params()));
}

TEST(Checkpoint, ShapeMismatchOnRestore) {
  auto spec = lcmsr::test::toy_spec();
  auto a = make_rae(spec, 1);
  spec.ae_base_width = 8;
  auto b = make_rae(spec, 1);
  Checkpoint ck;
  ck.put(a.encoder_params());
  EXPECT_THROW(ck.restore(b.encoder_params()), ShapeError);
}

TEST(Checkpoint, RejectsForeignAndTruncatedFiles) {
  TempDir dir;
  EXPECT_THROW(Checkpoint::load(dir / "missing.ckpt"), IoError);
  std::ofstream(dir / "junk.ckpt") << "hello world, definitely not a checkpoint";
  EXPECT_THROW(Checkpoint::load(dir / "junk.ckpt"), IoError);

  Checkpoint ck;
  ck.put("w", torch::randn({64}));
  ck.save(dir / "full.ckpt");
  const auto size = std::filesystem::file_size(dir / "full.ckpt");
  std::filesystem::copy_file(dir / "full.ckpt", dir / "cut.ckpt");
  std::filesystem::resize_file(dir / "cut.ckpt", size - 16);
  EXPECT_THROW(Checkpoint::load(dir / "cut.ckpt"), IoError);

  // Unknown format version.
  std::fstream f(dir / "full.ckpt", std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(8);
  const std::uint32_t v = 99;
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
  f.close();
  EXPECT_THROW(Checkpoint::load(dir / "full.ckpt"), IoError);
}

TEST(Checkpoint, AdamStateRoundTrip) {
  auto w = torch::randn({4}, torch::kFloat64).requires_grad_(true);
  ParameterSet params;
  params.add("w", w);
  torch::optim::Adam opt({w}, torch::optim::AdamOptions(0.1));
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    (w * w).sum().backward();
    opt.step();
  }
  Checkpoint ck;
  put_adam_state(ck, opt, params, "optim/");
  EXPECT_TRUE(ck.contains("optim/w#exp_avg"));
  EXPECT_EQ(ck.at("optim/w#step").item<std::int64_t>(), 3);

  auto w2 = w.detach().clone().requires_grad_(true);
  ParameterSet params2;
  params2.add("w", w2);
  torch::optim::Adam opt2({w2}, torch::optim::AdamOptions(0.1));
  restore_adam_state(ck, opt2, params2, "optim/");
  for (auto* o : {&opt, &opt2}) {
    auto& p = o == &opt ? w : w2;
    o->zero_grad();
    (p * p).sum().backward();
    o->step();
  }
  EXPECT_TRUE(torch::equal(w, w2));
}
