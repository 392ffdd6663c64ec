#pragma once

// Network definitions: residual encoder (also used as the conditional network),
// dual-branch decoder (latent-decoding branch feeding an IMDB-based SR branch),
// UNet noise predictor and the patch discriminator used in stage-1 training.
//
// All modules operate on NCHW batches. The free functions at the bottom also
// accept single CHW images.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "lcmsr/error.hpp"
#include "lcmsr/params.hpp"
#include "lcmsr/schedule.hpp"
#include "lcmsr/tensor_ops.hpp"

namespace lcmsr {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

struct EncoderSpec {
  std::int64_t in_channels = 6;
  std::int64_t latent_channels = 4;
  std::int64_t downsample_factor = 8;
  std::int64_t base_width = 64;
};

struct SRBranchSpec {
  std::int64_t num_fru = 4;
  std::int64_t imdb_per_fru = 12;
  std::int64_t feature_width = 64;
  std::int64_t upscale = 4;
};

// What the denoiser's output layer regresses. `eps` is the noise itself.
// `sample` regresses the clean latent and `residual` regresses its offset from
// the conditional features; denoise_eps converts both to the implied noise, so
// the one-step estimate at t = T-1 does not scale network error by 1/sqrt(abar).
enum class Prediction { eps, sample, residual };

inline std::string to_string(Prediction p) {
  switch (p) {
    case Prediction::eps: return "eps";
    case Prediction::sample: return "sample";
    case Prediction::residual: return "residual";
  }
  return "?";
}

inline Prediction parse_prediction(const std::string& s) {
  if (s == "eps") return Prediction::eps;
  if (s == "sample") return Prediction::sample;
  if (s == "residual") return Prediction::residual;
  throw ValidationError("unknown denoiser prediction '" + s + "' (expected eps, sample or residual)");
}

// Everything needed to rebuild all five networks.
struct ModelSpec {
  std::int64_t image_channels = 3;
  std::int64_t latent_channels = 4;
  std::int64_t downsample_factor = 8;
  std::int64_t ae_base_width = 64;
  std::int64_t cond_base_width = 64;
  std::int64_t sr_width = 64;
  std::int64_t num_fru = 4;
  std::int64_t imdb_per_fru = 12;
  std::int64_t unet_base_width = 64;
  std::vector<std::int64_t> unet_mults{1, 2, 4};
  std::int64_t disc_base_width = 64;
  Prediction unet_prediction = Prediction::residual;
  // Decoder output is added to the bicubic-upsampled LR image.
  bool sr_global_skip = true;

  static constexpr std::int64_t upscale = 4;

  EncoderSpec encoder() const {
    return {2 * image_channels, latent_channels, downsample_factor, ae_base_width};
  }
  EncoderSpec cond() const { return {image_channels, latent_channels, downsample_factor, cond_base_width}; }
  SRBranchSpec sr_branch() const { return {num_fru, imdb_per_fru, sr_width, upscale}; }

  void validate() const {
    auto positive = [](std::int64_t v, const char* name) {
      if (v <= 0) throw ValidationError(std::string(name) + " must be positive");
    };
    positive(image_channels, "model.image_channels");
    positive(latent_channels, "model.latent_channels");
    positive(ae_base_width, "model.ae_base_width");
    positive(cond_base_width, "model.cond_base_width");
    positive(sr_width, "model.sr_width");
    positive(num_fru, "model.num_fru");
    positive(imdb_per_fru, "model.imdb_per_fru");
    positive(unet_base_width, "model.unet_base_width");
    positive(disc_base_width, "model.disc_base_width");
    const auto f = downsample_factor;
    if (f < 2 || (f & (f - 1)) != 0) throw ValidationError("model.downsample_factor must be a power of 2 >= 2");
    if (sr_width % 4 != 0) throw ValidationError("model.sr_width must be divisible by 4 (IMDB distillation)");
    if (unet_mults.empty()) throw ValidationError("model.unet_mults must not be empty");
    for (auto m : unet_mults) positive(m, "model.unet_mults entry");
  }
};

inline std::int64_t log2_exact(std::int64_t v) {
  std::int64_t n = 0;
  while ((std::int64_t{1} << n) < v) ++n;
  return n;
}

inline std::int64_t norm_groups(std::int64_t channels) {
  for (std::int64_t g = std::min<std::int64_t>(8, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

inline nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2));
}

inline void zero_(nn::Conv2d& c) {
  torch::NoGradGuard no_grad;
  c->weight.zero_();
  if (c->bias.defined()) c->bias.zero_();
}

// GroupNorm -> SiLU -> conv -> (+ time) -> GroupNorm -> SiLU -> conv, plus skip.
struct ResBlockImpl : nn::Module {
  ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t temb_dim = 0)
      : norm1(register_module("norm1", nn::GroupNorm(norm_groups(in), in))),
        conv1(register_module("conv1", conv(in, out, 3))),
        norm2(register_module("norm2", nn::GroupNorm(norm_groups(out), out))),
        conv2(register_module("conv2", conv(out, out, 3))) {
    if (temb_dim > 0) temb_proj = register_module("temb_proj", nn::Linear(temb_dim, out));
    if (in != out) skip = register_module("skip", conv(in, out, 1));
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb = {}) {
    auto h = conv1(F::silu(norm1(x)));
    if (!temb_proj.is_empty()) h = h + temb_proj(F::silu(temb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2(F::silu(norm2(h)));
    return (skip.is_empty() ? x : skip(x)) + h;
  }

  nn::GroupNorm norm1;
  nn::Conv2d conv1;
  nn::GroupNorm norm2;
  nn::Conv2d conv2;
  nn::Linear temb_proj{nullptr};
  nn::Conv2d skip{nullptr};
};
TORCH_MODULE(ResBlock);

// Single-head spatial self-attention (UNet mid block only).
struct AttentionImpl : nn::Module {
  explicit AttentionImpl(std::int64_t ch)
      : norm(register_module("norm", nn::GroupNorm(norm_groups(ch), ch))),
        qkv(register_module("qkv", conv(ch, 3 * ch, 1))),
        proj(register_module("proj", conv(ch, ch, 1))) {}

  torch::Tensor forward(const torch::Tensor& x) {
    const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    auto parts = qkv(norm(x)).reshape({n, 3, c, h * w}).unbind(1);
    auto attn = torch::softmax(torch::matmul(parts[0].transpose(1, 2), parts[1]) / std::sqrt(double(c)), -1);
    auto out = torch::matmul(parts[2], attn.transpose(1, 2)).reshape({n, c, h, w});
    return x + proj(out);
  }

  nn::GroupNorm norm;
  nn::Conv2d qkv;
  nn::Conv2d proj;
};
TORCH_MODULE(Attention);

inline std::vector<std::int64_t> ae_widths(std::int64_t base, std::int64_t downsample_factor) {
  const auto levels = log2_exact(downsample_factor) + 1;
  std::vector<std::int64_t> w;
  for (std::int64_t i = 0; i < levels; ++i) w.push_back(base * std::min<std::int64_t>(std::int64_t{1} << i, 4));
  return w;
}

struct Posterior {
  torch::Tensor mean;
  torch::Tensor logvar;
};

// Convolutional encoder in the latent-diffusion style: one residual block per
// resolution level, stride-2 downsampling between levels.
struct ResidualEncoderImpl : nn::Module {
  ResidualEncoderImpl(EncoderSpec spec, bool posterior) : spec(spec), posterior_head(posterior) {
    if (spec.downsample_factor < 1 || (spec.downsample_factor & (spec.downsample_factor - 1)) != 0) {
      throw ValidationError("downsample factor must be a power of 2");
    }
    const auto widths = ae_widths(spec.base_width, spec.downsample_factor);
    conv_in = register_module("conv_in", conv(spec.in_channels, widths[0], 3));
    std::int64_t ch = widths[0];
    for (std::size_t i = 0; i < widths.size(); ++i) {
      blocks->push_back(ResBlock(ch, widths[i]));
      ch = widths[i];
      if (i + 1 < widths.size()) downs->push_back(conv(ch, ch, 3, 2));
    }
    register_module("blocks", blocks);
    register_module("downs", downs);
    mid = register_module("mid", ResBlock(ch, ch));
    norm_out = register_module("norm_out", nn::GroupNorm(norm_groups(ch), ch));
    conv_out = register_module("conv_out", conv(ch, (posterior ? 2 : 1) * spec.latent_channels, 3));
  }

  torch::Tensor features(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(1) != spec.in_channels) {
      throw ShapeError("encoder expects N x " + std::to_string(spec.in_channels) + " x H x W, got " + shape_str(x));
    }
    const auto f = spec.downsample_factor;
    if (x.size(2) % f != 0 || x.size(3) % f != 0) {
      throw ShapeError("spatial dims " + shape_str(x) + " not divisible by downsample factor " + std::to_string(f));
    }
    auto h = conv_in(x);
    for (std::size_t i = 0; i < blocks->size(); ++i) {
      h = blocks[i]->as<ResBlock>()->forward(h);
      if (i < downs->size()) h = downs[i]->as<nn::Conv2d>()->forward(h);
    }
    h = mid(h);
    return conv_out(F::silu(norm_out(h)));
  }

  Posterior posterior(const torch::Tensor& x) {
    auto h = features(x);
    if (!posterior_head) return {h, torch::Tensor()};
    auto parts = h.chunk(2, 1);
    return {parts[0], parts[1].clamp(-30.0, 20.0)};
  }

  torch::Tensor forward(const torch::Tensor& x) { return posterior(x).mean; }

  EncoderSpec spec;
  bool posterior_head;
  nn::Conv2d conv_in{nullptr};
  nn::ModuleList blocks;
  nn::ModuleList downs;
  ResBlock mid{nullptr};
  nn::GroupNorm norm_out{nullptr};
  nn::Conv2d conv_out{nullptr};
};
TORCH_MODULE(ResidualEncoder);

// Information multi-distillation block: three distillation stages each keep a
// quarter of the channels, the four parts are fused by a 1x1 conv and added
// back to the input.
struct IMDBImpl : nn::Module {
  explicit IMDBImpl(std::int64_t width) : width(width), distilled(width / 4), remaining(width - width / 4) {
    if (width % 4 != 0) throw ValidationError("IMDB width must be divisible by 4");
    c1 = register_module("c1", conv(width, width, 3));
    c2 = register_module("c2", conv(remaining, width, 3));
    c3 = register_module("c3", conv(remaining, width, 3));
    c4 = register_module("c4", conv(remaining, distilled, 3));
    fuse = register_module("fuse", conv(4 * distilled, width, 1));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(1) != width) {
      throw ShapeError("IMDB expects " + std::to_string(width) + " channels, got " + shape_str(x));
    }
    auto act = [](const torch::Tensor& t) { return F::leaky_relu(t, F::LeakyReLUFuncOptions().negative_slope(0.05)); };
    auto s1 = act(c1(x)).split_with_sizes({distilled, remaining}, 1);
    auto s2 = act(c2(s1[1])).split_with_sizes({distilled, remaining}, 1);
    auto s3 = act(c3(s2[1])).split_with_sizes({distilled, remaining}, 1);
    auto d4 = c4(s3[1]);
    return x + fuse(torch::cat({s1[0], s2[0], s3[0], d4}, 1));
  }

  std::int64_t width, distilled, remaining;
  nn::Conv2d c1{nullptr}, c2{nullptr}, c3{nullptr}, c4{nullptr}, fuse{nullptr};
};
TORCH_MODULE(IMDB);

// Feature refinement unit: side input added to the incoming features, a chain
// of IMDBs, and a 1x1 conv compressing the concatenated per-block outputs.
struct FRUImpl : nn::Module {
  FRUImpl(std::int64_t width, std::int64_t num_imdb) {
    for (std::int64_t i = 0; i < num_imdb; ++i) imdbs->push_back(IMDB(width));
    register_module("imdbs", imdbs);
    compress = register_module("compress", conv(num_imdb * width, width, 1));
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& side) {
    auto h = side.defined() ? x + side : x;
    std::vector<torch::Tensor> levels;
    levels.reserve(imdbs->size());
    auto cur = h;
    for (const auto& m : *imdbs) {
      cur = m->as<IMDB>()->forward(cur);
      levels.push_back(cur);
    }
    return h + compress(torch::cat(levels, 1));
  }

  nn::ModuleList imdbs;
  nn::Conv2d compress{nullptr};
};
TORCH_MODULE(FRU);

// Decoder with two branches. The latent-decoding branch mirrors the encoder and
// emits one side output per FRU; each side output is projected to the SR width
// by a 1x1 conv, resized to LR resolution and added into its FRU. The SR branch
// works at LR resolution and ends in a x4 pixel shuffle.
struct DualBranchDecoderImpl : nn::Module {
  explicit DualBranchDecoderImpl(const ModelSpec& ms) : spec(ms), sr(ms.sr_branch()) {
    const auto widths = ae_widths(ms.ae_base_width, ms.downsample_factor);
    const auto ups = static_cast<std::int64_t>(widths.size()) - 1;
    std::int64_t ch = widths.back();
    latent_in = register_module("latent_in", conv(ms.latent_channels, ch, 3));
    latent_mid = register_module("latent_mid", ResBlock(ch, ch));
    for (std::int64_t i = 0; i < sr.num_fru; ++i) {
      const auto level = std::max<std::int64_t>(ups - i, 0);
      const auto out = widths[static_cast<std::size_t>(level)];
      latent_blocks->push_back(ResBlock(ch, out));
      ch = out;
      if (i < ups && i + 1 < sr.num_fru) latent_ups->push_back(conv(ch, ch, 3));
      side_proj->push_back(conv(ch, sr.feature_width, 1));
    }
    register_module("latent_blocks", latent_blocks);
    register_module("latent_ups", latent_ups);
    register_module("side_proj", side_proj);

    shallow = register_module("shallow", conv(ms.image_channels, sr.feature_width, 3));
    for (std::int64_t i = 0; i < sr.num_fru; ++i) frus->push_back(FRU(sr.feature_width, sr.imdb_per_fru));
    register_module("frus", frus);
    body = register_module("body", conv(sr.feature_width, sr.feature_width, 3));
    upsampler = register_module("upsampler", conv(sr.feature_width, ms.image_channels * sr.upscale * sr.upscale, 3));
  }

  std::vector<torch::Tensor> side_outputs(const torch::Tensor& z) {
    auto h = latent_mid(latent_in(z));
    std::vector<torch::Tensor> out;
    for (std::size_t i = 0; i < latent_blocks->size(); ++i) {
      h = latent_blocks[i]->as<ResBlock>()->forward(h);
      out.push_back(h);
      if (i < latent_ups->size()) {
        h = F::interpolate(h, F::InterpolateFuncOptions()
                                  .scale_factor(std::vector<double>{2.0, 2.0})
                                  .mode(torch::kNearest));
        h = latent_ups[i]->as<nn::Conv2d>()->forward(h);
      }
    }
    return out;
  }

  torch::Tensor forward(const torch::Tensor& lr, const torch::Tensor& z) {
    if (lr.dim() != 4 || lr.size(1) != spec.image_channels) {
      throw ShapeError("decoder expects N x " + std::to_string(spec.image_channels) + " x h x w LR, got " +
                       shape_str(lr));
    }
    const auto h = lr.size(2), w = lr.size(3);
    const auto f = spec.downsample_factor;
    const auto u = sr.upscale;
    if (z.dim() != 4 || z.size(0) != lr.size(0) || z.size(1) != spec.latent_channels || (h * u) % f != 0 ||
        (w * u) % f != 0 || z.size(2) != h * u / f || z.size(3) != w * u / f) {
      throw ShapeError("latent " + shape_str(z) + " inconsistent with LR " + shape_str(lr) +
                       " at downsample factor " + std::to_string(f));
    }
    const auto sides = side_outputs(z);
    auto feat = shallow(lr);
    const auto shallow_feat = feat;
    for (std::size_t i = 0; i < frus->size(); ++i) {
      auto side = resize_bilinear(side_proj[i]->as<nn::Conv2d>()->forward(sides[i]), h, w);
      feat = frus[i]->as<FRU>()->forward(feat, side);
    }
    auto out = torch::pixel_shuffle(upsampler(body(feat) + shallow_feat), u);
    if (spec.sr_global_skip) out = out + bicubic_resize(lr, h * u, w * u);
    return out;
  }

  ModelSpec spec;
  SRBranchSpec sr;
  nn::Conv2d latent_in{nullptr};
  ResBlock latent_mid{nullptr};
  nn::ModuleList latent_blocks;
  nn::ModuleList latent_ups;
  nn::ModuleList side_proj;
  nn::Conv2d shallow{nullptr};
  nn::ModuleList frus;
  nn::Conv2d body{nullptr};
  nn::Conv2d upsampler{nullptr};
};
TORCH_MODULE(DualBranchDecoder);

inline torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim, torch::ScalarType dtype) {
  const auto half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat64) / double(half));
  auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
  if (dim % 2) emb = torch::cat({emb, torch::zeros({t.size(0), 1}, torch::kFloat64)}, 1);
  return emb.to(dtype);
}

// Noise predictor eps(z_t, c, t). The condition is concatenated with z_t along
// channels; t enters through a sinusoidal embedding added inside every res block.
struct UNetDenoiserImpl : nn::Module {
  UNetDenoiserImpl(std::int64_t latent_channels, std::int64_t base, std::vector<std::int64_t> mults,
                   Prediction prediction = Prediction::eps)
      : latent_channels(latent_channels), base(base), mults(std::move(mults)), prediction(prediction) {
    const auto temb = 4 * base;
    temb_fc1 = register_module("temb_fc1", nn::Linear(base, temb));
    temb_fc2 = register_module("temb_fc2", nn::Linear(temb, temb));
    conv_in = register_module("conv_in", conv(2 * latent_channels, base * this->mults[0], 3));
    std::int64_t ch = base * this->mults[0];
    const auto n = this->mults.size();
    for (std::size_t i = 0; i < n; ++i) {
      const auto out = base * this->mults[i];
      down_blocks->push_back(ResBlock(ch, out, temb));
      ch = out;
      if (i + 1 < n) downsamples->push_back(conv(ch, ch, 3, 2));
    }
    mid1 = register_module("mid1", ResBlock(ch, ch, temb));
    mid_attn = register_module("mid_attn", Attention(ch));
    mid2 = register_module("mid2", ResBlock(ch, ch, temb));
    for (std::size_t k = 0; k < n; ++k) {
      const auto i = n - 1 - k;
      const auto out = base * this->mults[i];
      up_blocks->push_back(ResBlock(ch + out, out, temb));
      ch = out;
      if (i > 0) upsamples->push_back(conv(ch, ch, 3));
    }
    register_module("down_blocks", down_blocks);
    register_module("downsamples", downsamples);
    register_module("up_blocks", up_blocks);
    register_module("upsamples", upsamples);
    norm_out = register_module("norm_out", nn::GroupNorm(norm_groups(ch), ch));
    conv_out = register_module("conv_out", conv(ch, latent_channels, 3));
  }

  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& cond, const torch::Tensor& t) {
    if (z_t.dim() != 4 || z_t.size(1) != latent_channels || !z_t.sizes().equals(cond.sizes())) {
      throw ShapeError("denoiser input " + shape_str(z_t) + " and condition " + shape_str(cond) +
                       " must match with " + std::to_string(latent_channels) + " channels");
    }
    const auto div = std::int64_t{1} << (mults.size() - 1);
    if (z_t.size(2) % div != 0 || z_t.size(3) % div != 0) {
      throw ShapeError("latent dims " + shape_str(z_t) + " not divisible by " + std::to_string(div));
    }
    if (t.dim() != 1 || t.size(0) != z_t.size(0)) throw ShapeError("need one timestep per batch element");
    ++calls;

    auto temb = temb_fc2(F::silu(temb_fc1(timestep_embedding(t, base, z_t.scalar_type()))));
    auto h = conv_in(torch::cat({z_t, cond}, 1));
    std::vector<torch::Tensor> skips;
    for (std::size_t i = 0; i < down_blocks->size(); ++i) {
      h = down_blocks[i]->as<ResBlock>()->forward(h, temb);
      skips.push_back(h);
      if (i < downsamples->size()) h = downsamples[i]->as<nn::Conv2d>()->forward(h);
    }
    h = mid2(mid_attn(mid1(h, temb)), temb);
    for (std::size_t i = 0; i < up_blocks->size(); ++i) {
      h = up_blocks[i]->as<ResBlock>()->forward(torch::cat({h, skips.back()}, 1), temb);
      skips.pop_back();
      if (i < upsamples->size()) {
        h = F::interpolate(h, F::InterpolateFuncOptions()
                                  .scale_factor(std::vector<double>{2.0, 2.0})
                                  .mode(torch::kNearest));
        h = upsamples[i]->as<nn::Conv2d>()->forward(h);
      }
    }
    return conv_out(F::silu(norm_out(h)));
  }

  std::int64_t latent_channels;
  std::int64_t base;
  std::vector<std::int64_t> mults;
  Prediction prediction;
  // Number of forward evaluations; single logical caller per instance.
  std::int64_t calls = 0;

  nn::Linear temb_fc1{nullptr}, temb_fc2{nullptr};
  nn::Conv2d conv_in{nullptr};
  nn::ModuleList down_blocks, downsamples, up_blocks, upsamples;
  ResBlock mid1{nullptr};
  Attention mid_attn{nullptr};
  ResBlock mid2{nullptr};
  nn::GroupNorm norm_out{nullptr};
  nn::Conv2d conv_out{nullptr};
};
TORCH_MODULE(UNetDenoiser);

// Patch discriminator with three stride-2 levels; emits a logit map.
struct PatchDiscriminatorImpl : nn::Module {
  PatchDiscriminatorImpl(std::int64_t in_channels, std::int64_t base) {
    c1 = register_module("c1", nn::Conv2d(nn::Conv2dOptions(in_channels, base, 4).stride(2).padding(1)));
    c2 = register_module("c2", nn::Conv2d(nn::Conv2dOptions(base, 2 * base, 4).stride(2).padding(1)));
    n2 = register_module("n2", nn::GroupNorm(norm_groups(2 * base), 2 * base));
    c3 = register_module("c3", nn::Conv2d(nn::Conv2dOptions(2 * base, 4 * base, 4).stride(2).padding(1)));
    n3 = register_module("n3", nn::GroupNorm(norm_groups(4 * base), 4 * base));
    head = register_module("head", conv(4 * base, 1, 3));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto act = [](const torch::Tensor& t) { return F::leaky_relu(t, F::LeakyReLUFuncOptions().negative_slope(0.2)); };
    auto h = act(c1(x));
    h = act(n2(c2(h)));
    h = act(n3(c3(h)));
    return head(h);
  }

  nn::Conv2d c1{nullptr}, c2{nullptr}, c3{nullptr}, head{nullptr};
  nn::GroupNorm n2{nullptr}, n3{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

// Fan-in init followed by zeroing the output projection of every residual path.
inline void init_residual_zero(nn::Module& root, std::uint64_t seed) {
  init_fan_in(root, seed);
  for (auto& m : root.modules(/*include_self=*/true)) {
    if (auto* rb = m->as<ResBlockImpl>()) zero_(rb->conv2);
    if (auto* ib = m->as<IMDBImpl>()) zero_(ib->fuse);
    if (auto* fu = m->as<FRUImpl>()) zero_(fu->compress);
    if (auto* de = m->as<DualBranchDecoderImpl>()) zero_(de->upsampler);
    if (auto* at = m->as<AttentionImpl>()) zero_(at->proj);
    if (auto* un = m->as<UNetDenoiserImpl>()) zero_(un->conv_out);
  }
}

// Stage-1 networks.
struct RaeNetworks {
  ModelSpec spec;
  ResidualEncoder encoder{nullptr};
  DualBranchDecoder decoder{nullptr};
  PatchDiscriminator disc{nullptr};

  ParameterSet encoder_params() const { return ParameterSet(*encoder, "encoder."); }
  ParameterSet decoder_params() const { return ParameterSet(*decoder, "decoder."); }
  ParameterSet generator_params() const {
    auto p = encoder_params();
    p.append(decoder_params());
    return p;
  }
  ParameterSet disc_params() const { return ParameterSet(*disc, "disc."); }
  ParameterSet all_params() const {
    auto p = generator_params();
    p.append(disc_params());
    return p;
  }

  void to(torch::ScalarType dtype) {
    encoder->to(dtype);
    decoder->to(dtype);
    disc->to(dtype);
  }
};

inline RaeNetworks make_rae(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  RaeNetworks n{spec, ResidualEncoder(spec.encoder(), /*posterior=*/true), DualBranchDecoder(spec),
                PatchDiscriminator(spec.image_channels, spec.disc_base_width)};
  init_residual_zero(*n.encoder, derive_seed(seed, Stream::init, 1));
  init_residual_zero(*n.decoder, derive_seed(seed, Stream::init, 2));
  init_residual_zero(*n.disc, derive_seed(seed, Stream::init, 3));
  return n;
}

// Stage-2 networks: online denoiser, its EMA target and the conditional network.
struct LcdNetworks {
  ModelSpec spec;
  UNetDenoiser online{nullptr};
  UNetDenoiser target{nullptr};
  ResidualEncoder cond{nullptr};

  ParameterSet online_params() const { return ParameterSet(*online, "unet."); }
  ParameterSet target_params() const { return ParameterSet(*target, "unet."); }
  ParameterSet cond_params() const { return ParameterSet(*cond, "cond."); }
  ParameterSet trainable_params() const {
    auto p = online_params();
    p.append(cond_params());
    return p;
  }

  void to(torch::ScalarType dtype) {
    online->to(dtype);
    target->to(dtype);
    cond->to(dtype);
  }
};

inline LcdNetworks make_lcd(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  LcdNetworks n{spec, UNetDenoiser(spec.latent_channels, spec.unet_base_width, spec.unet_mults, spec.unet_prediction),
                UNetDenoiser(spec.latent_channels, spec.unet_base_width, spec.unet_mults, spec.unet_prediction),
                ResidualEncoder(spec.cond(), /*posterior=*/false)};
  init_residual_zero(*n.online, derive_seed(seed, Stream::init, 11));
  init_residual_zero(*n.cond, derive_seed(seed, Stream::init, 12));
  auto target = n.target_params();
  target.copy_from(n.online_params());
  target.set_requires_grad(false);
  return n;
}

// ---------------------------------------------------------------------------
// Per-operation entry points (accept CHW or NCHW).

inline torch::Tensor encode(const torch::Tensor& hr, const torch::Tensor& lr_up, ResidualEncoder& encoder) {
  if (!hr.sizes().equals(lr_up.sizes())) {
    throw ShapeError("HR " + shape_str(hr) + " and upsampled LR " + shape_str(lr_up) + " differ");
  }
  const bool single = hr.dim() == 3;
  auto x = torch::cat({single ? hr.unsqueeze(0) : hr, single ? lr_up.unsqueeze(0) : lr_up}, 1);
  auto z = encoder->posterior(x).mean;
  return single ? z.squeeze(0) : z;
}

inline torch::Tensor decode(const torch::Tensor& lr, const torch::Tensor& z, DualBranchDecoder& decoder) {
  if (lr.dim() != z.dim()) throw ShapeError("LR and latent must both be batched or both single");
  if (lr.dim() == 3) return decoder->forward(lr.unsqueeze(0), z.unsqueeze(0)).squeeze(0);
  return decoder->forward(lr, z);
}

inline torch::Tensor imdb_forward(const torch::Tensor& features, IMDB& block) {
  return apply_batched(features, [&](const torch::Tensor& x) { return block->forward(x); });
}

inline torch::Tensor cond_features(const torch::Tensor& lr_up, ResidualEncoder& cond_net) {
  return apply_batched(lr_up, [&](const torch::Tensor& x) { return cond_net->forward(x); });
}

inline torch::Tensor denoise_eps(const torch::Tensor& z_t, const torch::Tensor& cond, const torch::Tensor& t,
                                 UNetDenoiser& unet, const NoiseSchedule& schedule) {
  const bool single = z_t.dim() == 3;
  const auto zb = single ? z_t.unsqueeze(0) : z_t;
  detail::check_timesteps(t, zb, schedule);
  const auto cb = single ? cond.unsqueeze(0) : cond;
  auto out = unet->forward(zb, cb, t);
  if (unet->prediction == Prediction::residual) out = out + cb;
  if (unet->prediction != Prediction::eps) {
    auto signal = detail::per_sample(t, zb, [&](std::int64_t i) { return std::sqrt(schedule.alpha_bar[i]); });
    auto inv_noise =
        detail::per_sample(t, zb, [&](std::int64_t i) { return 1.0 / std::sqrt(1.0 - schedule.alpha_bar[i]); });
    out = (zb - signal * out) * inv_noise;
  }
  return single ? out.squeeze(0) : out;
}

inline torch::Tensor denoise_eps(const torch::Tensor& z_t, const torch::Tensor& cond, std::int64_t t,
                                 UNetDenoiser& unet, const NoiseSchedule& schedule) {
  const auto n = z_t.dim() == 3 ? 1 : z_t.size(0);
  return denoise_eps(z_t, cond, torch::full({n}, t, torch::kInt64), unet, schedule);
}

}  // namespace lcmsr
