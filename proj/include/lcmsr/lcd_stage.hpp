#pragma once

// Stage 2: latent consistency training.
//
// Each step encodes z0 with the frozen stage-1 encoder, draws one eps and a
// timestep t in [0, T-1-k], builds z_t and z_{t+k} from that same eps, and
// penalises the L1 gap between the online consistency output at t+k and the
// EMA target output at t (target branch outside autograd). The conditional
// network is pulled towards z0 by an L1 distillation term. One Adam step on the
// online denoiser and the conditional network is followed by the EMA update.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "lcmsr/backbone.hpp"
#include "lcmsr/checkpoint.hpp"
#include "lcmsr/config.hpp"
#include "lcmsr/datapipe.hpp"
#include "lcmsr/noise.hpp"
#include "lcmsr/params.hpp"
#include "lcmsr/rae_stage.hpp"
#include "lcmsr/schedule.hpp"
#include "lcmsr/training.hpp"

namespace lcmsr {

// c_skip(t) z_t + c_out(t) (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
// Rows with t == 0 return z_t exactly, whatever eps_hat holds.
inline torch::Tensor consistency_from_eps(const torch::Tensor& z_t, const torch::Tensor& eps_hat,
                                          const torch::Tensor& t, const NoiseSchedule& schedule) {
  if (!z_t.sizes().equals(eps_hat.sizes())) throw ShapeError("noise prediction shape differs from latent");
  detail::check_timesteps(t, z_t, schedule);
  auto skip = detail::per_sample(t, z_t, [&](std::int64_t i) { return boundary_coeffs(i, schedule).c_skip; });
  auto out = detail::per_sample(t, z_t, [&](std::int64_t i) { return boundary_coeffs(i, schedule).c_out; });
  auto noise_scale = detail::per_sample(t, z_t, [&](std::int64_t i) { return std::sqrt(1.0 - schedule.alpha_bar[i]); });
  auto inv_signal = detail::per_sample(t, z_t, [&](std::int64_t i) { return 1.0 / std::sqrt(schedule.alpha_bar[i]); });
  auto z0_hat = (z_t - noise_scale * eps_hat) * inv_signal;
  auto f = skip * z_t + out * z0_hat;
  auto at_boundary = detail::per_sample(t, z_t, [](std::int64_t i) { return i == 0 ? 1.0 : 0.0; }).to(torch::kBool);
  return torch::where(at_boundary, z_t, f);
}

inline torch::Tensor consistency_fn(const torch::Tensor& z_t, const torch::Tensor& cond, const torch::Tensor& t,
                                    UNetDenoiser& unet, const NoiseSchedule& schedule) {
  return consistency_from_eps(z_t, denoise_eps(z_t, cond, t, unet, schedule), t, schedule);
}

inline torch::Tensor consistency_fn(const torch::Tensor& z_t, const torch::Tensor& cond, std::int64_t t,
                                    UNetDenoiser& unet, const NoiseSchedule& schedule) {
  return consistency_fn(z_t, cond, torch::full({z_t.size(0)}, t, torch::kInt64), unet, schedule);
}

// t ~ U{0, ..., T-1-k}, so t + k stays a valid index.
inline torch::Tensor sample_ct_timesteps(NoiseSource& noise, std::int64_t n, std::int64_t total_steps,
                                         std::int64_t k) {
  if (k < 1 || k > total_steps - 1) throw RangeError("interval k must lie in [1, T-1]");
  return noise.uniform_int(0, total_steps - k, n);
}

// L1 between f_online(z_{t+k}, c, t+k) and f_target(z_t, c, t). The target
// branch is evaluated without autograd and sees a detached condition.
inline torch::Tensor ct_loss(const torch::Tensor& z0, const torch::Tensor& cond, const torch::Tensor& t,
                             const torch::Tensor& eps, UNetDenoiser& online, UNetDenoiser& target,
                             const ConsistencyConfig& cfg, const NoiseSchedule& schedule) {
  detail::check_timesteps(t, z0, schedule);
  if (t.max().item<std::int64_t>() + cfg.k > schedule.total_steps - 1) {
    throw RangeError("t + k exceeds the last timestep");
  }
  const auto t_next = t + cfg.k;
  auto z_t = forward_noise(z0, t, eps, schedule);
  auto z_next = forward_noise(z0, t_next, eps, schedule);
  auto pred = consistency_fn(z_next, cond, t_next, online, schedule);
  torch::Tensor anchor;
  {
    torch::NoGradGuard no_grad;
    anchor = consistency_fn(z_t, cond.detach(), t, target, schedule);
  }
  return mean_abs(pred, anchor);
}

inline torch::Tensor kd_loss(const torch::Tensor& lr_up, const torch::Tensor& z0, ResidualEncoder& cond_net) {
  return mean_abs(cond_features(lr_up, cond_net), z0);
}

struct LcdLosses {
  torch::Tensor total;
  torch::Tensor ct;  // CT loss, or the direct L1(f(z_t), z0) in no_consistency mode
  torch::Tensor kd;  // undefined in no_kd mode
  torch::Tensor t;

  std::map<std::string, double> values() const {
    std::map<std::string, double> v{{"ct", ct.item<double>()}, {"total", total.item<double>()}};
    if (kd.defined()) v["kd"] = kd.item<double>();
    return v;
  }
};

// Frozen stage-1 encoding (posterior mean, no sampling).
inline torch::Tensor encode_frozen(const Batch& batch, ResidualEncoder& encoder) {
  torch::NoGradGuard no_grad;
  return encoder->posterior(torch::cat({batch.hr, batch.lr_up}, 1)).mean;
}

// Loss of one stage-2 step. Draws exactly one eps and one timestep vector.
inline LcdLosses lcd_loss(const Batch& batch, const torch::Tensor& z0, LcdNetworks& nets,
                          const ConsistencyConfig& cfg, const NoiseSchedule& schedule, NoiseSource& noise) {
  cfg.validate(schedule.total_steps);
  LcdLosses out;
  const auto n = z0.size(0);
  out.t = sample_ct_timesteps(noise, n, schedule.total_steps, cfg.k);
  const auto eps = noise.normal(z0.sizes(), z0.scalar_type());
  const auto cond = cond_features(batch.lr_up, nets.cond);
  if (!cond.sizes().equals(z0.sizes())) {
    throw ShapeError("condition " + shape_str(cond) + " does not match latent " + shape_str(z0));
  }
  if (cfg.ablation == Ablation::no_consistency) {
    auto z_t = forward_noise(z0, out.t, eps, schedule);
    out.ct = mean_abs(consistency_fn(z_t, cond, out.t, nets.online, schedule), z0);
  } else {
    out.ct = ct_loss(z0, cond, out.t, eps, nets.online, nets.target, cfg, schedule);
  }
  out.total = cfg.lambda_ct * out.ct;
  if (cfg.ablation != Ablation::no_kd) {
    out.kd = mean_abs(cond, z0);
    out.total = out.total + cfg.lambda_kd * out.kd;
  }
  return out;
}

inline std::filesystem::path lcd_checkpoint_name(std::int64_t epoch) {
  return "lcd_epoch" + std::to_string(epoch) + ".ckpt";
}

inline Checkpoint lcd_checkpoint(const LcdNetworks& nets, torch::optim::Adam& optim, const LcdTrainConfig& cfg,
                                 std::int64_t epoch, std::int64_t global_step, const RunOptions& opt) {
  Checkpoint ck;
  ck.meta = {{"kind", "lcd"},
             {"epoch", epoch},
             {"global_step", global_step},
             {"seed", opt.seed},
             {"spec", spec_to_json(nets.spec)},
             {"ablation", to_string(cfg.consistency.ablation)},
             {"config", opt.config_echo}};
  ck.put(nets.online_params());
  ck.put(nets.target_params(), "target.");
  ck.put(nets.cond_params());
  put_adam_state(ck, optim, nets.trainable_params(), "optim/");
  return ck;
}

inline void restore_lcd(const Checkpoint& ck, LcdNetworks& nets) {
  ck.restore(nets.online_params());
  ck.restore(nets.target_params(), "target.");
  ck.restore(nets.cond_params());
}

inline LcdNetworks load_lcd(const std::filesystem::path& path) {
  auto ck = Checkpoint::load(path);
  if (ck.meta.value("kind", "") != "lcd") throw ValidationError(path.string() + " is not a stage-2 checkpoint");
  auto nets = make_lcd(spec_from_json(ck.meta.at("spec")), 0);
  restore_lcd(ck, nets);
  return nets;
}

inline void check_compatible(const ModelSpec& stage1, const ModelSpec& stage2) {
  if (stage1.image_channels != stage2.image_channels || stage1.latent_channels != stage2.latent_channels ||
      stage1.downsample_factor != stage2.downsample_factor) {
    throw ValidationError("stage-1 checkpoint is incompatible with the stage-2 model (channels / downsample factor)");
  }
}

inline TrainResult train_lcd(const std::vector<ImagePair>& data, RaeNetworks& rae, LcdNetworks& nets,
                             const LcdTrainConfig& cfg, const NoiseSchedule& schedule, const RunOptions& opt = {}) {
  if (data.empty()) throw ValidationError("stage-2 training needs a non-empty dataset");
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw ValidationError("invalid stage-2 epoch/batch configuration");
  cfg.consistency.validate(schedule.total_steps);
  check_compatible(rae.spec, nets.spec);

  rae.encoder_params().set_requires_grad(false);
  auto target = nets.target_params();
  target.set_requires_grad(false);
  const auto online = nets.online_params();
  const auto trainable = nets.trainable_params();
  torch::optim::Adam optim(trainable.tensors(),
                           torch::optim::AdamOptions(cfg.lr).betas({0.9, 0.999}).weight_decay(0.0));

  std::int64_t start_epoch = 0;
  std::int64_t global_step = 0;
  if (opt.resume) {
    auto ck = Checkpoint::load(*opt.resume);
    if (ck.meta.value("kind", "") != "lcd") throw ValidationError(opt.resume->string() + " is not a stage-2 checkpoint");
    restore_lcd(ck, nets);
    restore_adam_state(ck, optim, trainable, "optim/");
    start_epoch = ck.meta.at("epoch");
    global_step = ck.meta.at("global_step");
  }

  const bool with_kd = cfg.consistency.ablation != Ablation::no_kd;
  LossCsv csv;
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    csv = LossCsv(*opt.out_dir / "lcd_loss.csv",
                  with_kd ? std::vector<std::string>{"ct", "kd", "total"} : std::vector<std::string>{"ct", "total"});
  }

  TrainResult result;
  const auto n = static_cast<std::int64_t>(data.size());
  const auto dtype = online.entries().front().tensor.scalar_type();
  for (std::int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    EpochAccumulator acc;
    for (const auto& idx : make_batches(epoch_order(n, opt.seed, epoch), cfg.batch_size)) {
      const auto batch = collate(data, idx, dtype);
      const auto z0 = encode_frozen(batch, rae.encoder);
      GeneratorNoise noise(derive_seed(opt.seed, Stream::step, static_cast<std::uint64_t>(global_step)));

      optim.zero_grad();
      auto losses = lcd_loss(batch, z0, nets, cfg.consistency, schedule, noise);
      const auto values = losses.values();
      check_finite(values, global_step, epoch, opt.out_dir);
      losses.total.backward();
      optim.step();
      ema_update(target, online, cfg.consistency.mu);

      csv.row(global_step, epoch, values);
      acc.add(values);
      result.steps.push_back(values);
      ++global_step;
    }
    auto summary = acc.finish(epoch);
    result.epochs.push_back(summary);
    if (opt.on_epoch) opt.on_epoch(summary);
    if (opt.out_dir && ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs)) {
      const auto path = *opt.out_dir / lcd_checkpoint_name(epoch + 1);
      lcd_checkpoint(nets, optim, cfg, epoch + 1, global_step, opt).save(path);
      result.checkpoints.push_back(path);
    }
  }
  result.global_step = global_step;
  return result;
}

}  // namespace lcmsr
