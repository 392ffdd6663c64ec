#pragma once

// Stage 1: residual autoencoder training. The loss is L1 reconstruction only
// during warmup; afterwards a hinge adversarial term and a KL penalty on the
// encoder posterior are added. Generator and discriminator use separate Adam
// optimizers and alternate steps.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "lcmsr/backbone.hpp"
#include "lcmsr/checkpoint.hpp"
#include "lcmsr/config.hpp"
#include "lcmsr/datapipe.hpp"
#include "lcmsr/noise.hpp"
#include "lcmsr/training.hpp"

namespace lcmsr {

// KL(N(mean, exp(logvar)) || N(0, I)), summed over latent elements, averaged over the batch.
inline torch::Tensor kl_standard_normal(const torch::Tensor& mean, const torch::Tensor& logvar) {
  return 0.5 * (mean.square() + logvar.exp() - 1.0 - logvar).sum() / static_cast<double>(mean.size(0));
}

struct RaeLosses {
  torch::Tensor total;
  torch::Tensor l1;
  torch::Tensor adv;  // undefined during warmup
  torch::Tensor reg;  // undefined during warmup
  torch::Tensor sr;

  bool adversarial_active() const { return adv.defined(); }

  std::map<std::string, double> values() const {
    std::map<std::string, double> v{{"l1", l1.item<double>()}, {"total", total.item<double>()}};
    if (adv.defined()) v["adv"] = adv.item<double>();
    if (reg.defined()) v["reg"] = reg.item<double>();
    return v;
  }
};

inline void check_batch(const Batch& b) {
  if (b.hr.dim() != 4 || !b.hr.sizes().equals(b.lr_up.sizes()) || b.lr.dim() != 4 ||
      b.lr.size(0) != b.hr.size(0) || b.lr.size(2) * kScale != b.hr.size(2) || b.lr.size(3) * kScale != b.hr.size(3)) {
    throw ShapeError("misaligned batch: HR " + shape_str(b.hr) + ", LR " + shape_str(b.lr) + ", LR up " +
                     shape_str(b.lr_up));
  }
}

// Generator objective for one batch. The latent is sampled from the encoder
// posterior with the reparameterization trick using `noise`.
inline RaeLosses rae_loss(const Batch& batch, RaeNetworks& nets, const RaeLossWeights& weights, std::int64_t epoch,
                          NoiseSource& noise) {
  weights.validate();
  if (epoch < 0) throw RangeError("epoch must be non-negative");
  check_batch(batch);
  RaeLosses out;
  auto post = nets.encoder->posterior(torch::cat({batch.hr, batch.lr_up}, 1));
  auto z = post.mean + (0.5 * post.logvar).exp() * noise.normal(post.mean.sizes(), post.mean.scalar_type());
  out.sr = nets.decoder->forward(batch.lr, z);
  out.l1 = mean_abs(out.sr, batch.hr);
  out.total = weights.w_l1 * out.l1;
  if (epoch >= weights.warmup_epochs) {
    out.adv = -nets.disc->forward(out.sr).mean();
    out.reg = kl_standard_normal(post.mean, post.logvar);
    out.total = out.total + weights.w_adv * out.adv + weights.w_reg * out.reg;
  }
  return out;
}

// Hinge loss for the discriminator; `sr` must already be detached.
inline torch::Tensor disc_loss(const torch::Tensor& hr, const torch::Tensor& sr, RaeNetworks& nets) {
  return torch::relu(1.0 - nets.disc->forward(hr)).mean() + torch::relu(1.0 + nets.disc->forward(sr)).mean();
}

struct RunOptions {
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> out_dir;  // checkpoints + loss CSV; nothing written when empty
  std::optional<std::filesystem::path> resume;
  std::string config_echo;
  std::function<void(const EpochSummary&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochSummary> epochs;
  std::vector<std::filesystem::path> checkpoints;
  std::vector<std::map<std::string, double>> steps;  // per-step losses of this invocation
  std::int64_t global_step = 0;
};

inline std::filesystem::path rae_checkpoint_name(std::int64_t epoch) {
  return "rae_epoch" + std::to_string(epoch) + ".ckpt";
}

inline Checkpoint rae_checkpoint(const RaeNetworks& nets, torch::optim::Adam& gen_opt, torch::optim::Adam& disc_opt,
                                 std::int64_t epoch, std::int64_t global_step, const RunOptions& opt) {
  Checkpoint ck;
  ck.meta = {{"kind", "rae"},   {"epoch", epoch},   {"global_step", global_step}, {"seed", opt.seed},
             {"spec", spec_to_json(nets.spec)}, {"config", opt.config_echo}};
  ck.put(nets.all_params());
  put_adam_state(ck, gen_opt, nets.generator_params(), "optim.gen/");
  put_adam_state(ck, disc_opt, nets.disc_params(), "optim.disc/");
  return ck;
}

// Rebuilds stage-1 networks from a checkpoint.
inline RaeNetworks load_rae(const std::filesystem::path& path) {
  auto ck = Checkpoint::load(path);
  if (ck.meta.value("kind", "") != "rae") throw ValidationError(path.string() + " is not a stage-1 checkpoint");
  auto nets = make_rae(spec_from_json(ck.meta.at("spec")), 0);
  ck.restore(nets.all_params());
  return nets;
}

inline TrainResult train_rae(const std::vector<ImagePair>& data, RaeNetworks& nets, const RaeTrainConfig& cfg,
                             const RunOptions& opt = {}) {
  if (data.empty()) throw ValidationError("stage-1 training needs a non-empty dataset");
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw ValidationError("invalid stage-1 epoch/batch configuration");
  cfg.weights.validate();

  const auto gen_params = nets.generator_params();
  const auto disc_params = nets.disc_params();
  torch::optim::Adam gen_opt(gen_params.tensors(),
                             torch::optim::AdamOptions(cfg.lr).betas({0.9, 0.999}).weight_decay(0.0));
  torch::optim::Adam disc_opt(disc_params.tensors(),
                              torch::optim::AdamOptions(cfg.disc_lr).betas({0.9, 0.999}).weight_decay(0.0));

  std::int64_t start_epoch = 0;
  std::int64_t global_step = 0;
  if (opt.resume) {
    auto ck = Checkpoint::load(*opt.resume);
    if (ck.meta.value("kind", "") != "rae") throw ValidationError(opt.resume->string() + " is not a stage-1 checkpoint");
    ck.restore(nets.all_params());
    restore_adam_state(ck, gen_opt, gen_params, "optim.gen/");
    restore_adam_state(ck, disc_opt, disc_params, "optim.disc/");
    start_epoch = ck.meta.at("epoch");
    global_step = ck.meta.at("global_step");
  }

  LossCsv csv;
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    csv = LossCsv(*opt.out_dir / "rae_loss.csv", {"l1", "adv", "reg", "total"});
  }

  TrainResult result;
  const auto n = static_cast<std::int64_t>(data.size());
  const auto dtype = gen_params.entries().front().tensor.scalar_type();
  for (std::int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    EpochAccumulator acc;
    for (const auto& idx : make_batches(epoch_order(n, opt.seed, epoch), cfg.batch_size)) {
      const auto batch = collate(data, idx, dtype);
      GeneratorNoise noise(derive_seed(opt.seed, Stream::step, static_cast<std::uint64_t>(global_step)));

      disc_params.set_requires_grad(false);
      gen_opt.zero_grad();
      auto losses = rae_loss(batch, nets, cfg.weights, epoch, noise);
      const auto values = losses.values();
      check_finite(values, global_step, epoch, opt.out_dir);
      losses.total.backward();
      gen_opt.step();
      disc_params.set_requires_grad(true);

      if (losses.adversarial_active()) {
        gen_params.set_requires_grad(false);
        disc_opt.zero_grad();
        disc_loss(batch.hr, losses.sr.detach(), nets).backward();
        disc_opt.step();
        gen_params.set_requires_grad(true);
      }

      csv.row(global_step, epoch, values);
      acc.add(values);
      result.steps.push_back(values);
      ++global_step;
    }
    auto summary = acc.finish(epoch);
    result.epochs.push_back(summary);
    if (opt.on_epoch) opt.on_epoch(summary);
    if (opt.out_dir && ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs)) {
      const auto path = *opt.out_dir / rae_checkpoint_name(epoch + 1);
      rae_checkpoint(nets, gen_opt, disc_opt, epoch + 1, global_step, opt).save(path);
      result.checkpoints.push_back(path);
    }
  }
  result.global_step = global_step;
  return result;
}

}  // namespace lcmsr
