#pragma once

// Deterministic miniature diffusion backbone.
//
//   unet_like block:  x1 = x + gelu(mix(conv3(group_norm(x))) + cond);  out = x1 + attn(x1)
//   dit_like block:   x1 = x + attn(channel_norm(x));                  out = x1 + ff(x1) + cond
//
// cond is a per-request bias derived from a pseudo-prompt embedding and the
// step index. A denoising step runs every block and moves the latent toward
// the stack output: z' = z + (out - z) / (steps - step).
//
// Both a whole-image path (one image at a time, core ops) and a patched path
// (CSP batch, patched ops) are provided; they visit every reduction in the
// same order and agree bit for bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mixres/cache_manager.hpp"
#include "mixres/error.hpp"
#include "mixres/ops.hpp"
#include "mixres/patch_format.hpp"
#include "mixres/patched_ops.hpp"
#include "mixres/rng.hpp"
#include "mixres/tensor.hpp"

namespace mixres {

enum class ModelKind { unet_like, dit_like };

inline std::string_view to_string(ModelKind k) { return k == ModelKind::unet_like ? "unet_like" : "dit_like"; }

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "unet_like") return ModelKind::unet_like;
  if (s == "dit_like") return ModelKind::dit_like;
  throw InvalidArgument("unknown model kind '" + std::string(s) + "'");
}

struct ModelConfig {
  ModelKind kind = ModelKind::unet_like;
  std::size_t blocks_per_step = 7;
  std::size_t steps = 50;
  std::size_t channels = 4;
  std::size_t groups = 2;
  std::size_t ff_hidden = 8;
  std::size_t attention_stride = 8;  // token cell side; must divide the patch size
  double weight_scale = 0.5;
  std::uint64_t seed = 0;

  static ModelConfig defaults(ModelKind kind) {
    ModelConfig cfg;
    cfg.kind = kind;
    cfg.blocks_per_step = kind == ModelKind::unet_like ? 7 : 24;
    return cfg;
  }

  /// Reduced steps (and transformer depth) used by tests.
  static ModelConfig test_preset(ModelKind kind) {
    ModelConfig cfg = defaults(kind);
    cfg.steps = 10;
    if (kind == ModelKind::dit_like) cfg.blocks_per_step = 12;
    return cfg;
  }

  void validate() const {
    detail::require(blocks_per_step >= 1, "model: blocks_per_step must be >= 1");
    detail::require(steps >= 1, "model: steps must be >= 1");
    detail::require(channels >= 1 && groups >= 1 && channels % groups == 0, "model: groups must divide channels");
    detail::require(attention_stride >= 1, "model: attention_stride must be >= 1");
    detail::require(ff_hidden >= 1, "model: ff_hidden must be >= 1");
  }
};

struct BlockWeights {
  GroupNormParams norm;  // unet_like only
  ConvParams conv;       // unet_like only
  Linear mix;            // unet_like only
  FeedForwardParams ff;  // dit_like only
  AttentionParams attn;
  Linear cond;  // embedding -> per-channel bias
};

/// Which prompt a request carries and which step it is at.
struct RequestContext {
  std::uint64_t prompt = 0;
  std::size_t step = 0;
};

struct StepTelemetry {
  std::size_t block_invocations = 0;
  std::size_t kernel_launches = 0;
  std::size_t skipped_patch_blocks = 0;
  std::size_t total_patch_blocks = 0;
};

class ToyModel {
 public:
  explicit ToyModel(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(cfg_.seed, 0x746f79));
    blocks_.reserve(cfg_.blocks_per_step);
    for (std::size_t b = 0; b < cfg_.blocks_per_step; ++b) blocks_.push_back(random_block(rng));
  }

  /// Same architecture with every weight zero.
  static ToyModel zeros(ModelConfig cfg) {
    ToyModel m(cfg);
    for (auto& b : m.blocks_) zero_block(b);
    return m;
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const std::vector<BlockWeights>& blocks() const noexcept { return blocks_; }

  /// Pseudo-prompt plus step embedding, length C.
  std::vector<double> embedding(const RequestContext& ctx) const {
    Rng rng(mix_seed(0x70726f6d7074ULL, ctx.prompt));
    std::vector<double> e(cfg_.channels);
    for (std::size_t c = 0; c < e.size(); ++c) {
      const double freq = 1.0 / std::pow(10.0, static_cast<double>(c) / static_cast<double>(e.size()));
      e[c] = 0.5 * rng.normal() + std::sin(static_cast<double>(ctx.step) * freq);
    }
    return e;
  }

  std::vector<double> cond_bias(std::size_t block, const RequestContext& ctx) const {
    const Linear& lin = blocks_.at(block).cond;
    const auto e = embedding(ctx);
    std::vector<double> out(lin.out_features());
    for (std::size_t co = 0; co < out.size(); ++co) {
      double acc = lin.bias[co];
      for (std::size_t ci = 0; ci < e.size(); ++ci) acc += lin.weight[co * e.size() + ci] * e[ci];
      out[co] = acc;
    }
    return out;
  }

  // -------------------------------------------------------------------------
  // Whole-image path

  /// One block on a (1,C,H,W) image.
  Tensor block_forward(std::size_t block, const Tensor& image, std::span<const double> cond) const {
    const BlockWeights& w = blocks_.at(block);
    if (cfg_.kind == ModelKind::unet_like) {
      const Tensor h = gelu(linear(conv2d(group_norm(image, w.norm), w.conv), w.mix, cond));
      const Tensor x1 = residual_add(image, h);
      return residual_add(x1, attention_layer(x1, w.attn, cfg_.attention_stride));
    }
    const Tensor x1 = residual_add(image, attention_layer(channel_norm(image), w.attn, cfg_.attention_stride));
    return residual_add(x1, feed_forward(x1, w.ff, cond));
  }

  /// One denoising step on a single (C,H,W) latent.
  Tensor denoise_step(const Tensor& latent, const RequestContext& ctx) const {
    check_step(ctx.step);
    detail::require(latent.rank() == 3 && latent.dim(0) == cfg_.channels, "denoise_step: latent must be (C,H,W)");
    Tensor x = latent.reshaped({1, latent.dim(0), latent.dim(1), latent.dim(2)});
    for (std::size_t b = 0; b < blocks_.size(); ++b) x = block_forward(b, x, cond_bias(b, ctx));
    return advance(latent, x.reshaped(latent.shape()), ctx.step);
  }

  /// Full generation of one request from its initial latent.
  Tensor generate(const Tensor& latent, std::uint64_t prompt) const {
    Tensor z = latent;
    for (std::size_t s = 0; s < cfg_.steps; ++s) z = denoise_step(z, {prompt, s});
    return z;
  }

  // -------------------------------------------------------------------------
  // Patched path

  /// One block on a CSP batch; `conds[i]` is the bias of CSP request i.
  CspBatch block_forward(std::size_t block, const CspBatch& x, const std::vector<std::vector<double>>& conds,
                         StepTelemetry* tel = nullptr) const {
    const BlockWeights& w = blocks_.at(block);
    const auto& lay = x.layout();
    auto count = [&](std::size_t n) {
      if (tel) tel->kernel_launches += n;
    };
    if (tel) ++tel->block_invocations;
    const std::size_t attention_groups = lay.num_resolutions();
    if (cfg_.kind == ModelKind::unet_like) {
      auto [normed, halo] = stitched_group_norm(x, w.norm, 1);
      const CspBatch conv = patched_conv(normed, halo, w.conv);
      const CspBatch h = map_patches(conv, [&](std::size_t i, const Tensor& t) {
        return gelu(linear(t, w.mix, conds[lay.patch(i).request_index]));
      });
      const CspBatch x1 = patched_residual_add(x, h);
      const CspBatch out = patched_residual_add(x1, patched_self_attention(x1, w.attn, cfg_.attention_stride));
      count(5 + attention_groups);
      return out;
    }
    const CspBatch normed = map_patches(x, [](std::size_t, const Tensor& t) { return channel_norm(t); });
    const CspBatch x1 = patched_residual_add(x, patched_self_attention(normed, w.attn, cfg_.attention_stride));
    const CspBatch f = map_patches(x1, [&](std::size_t i, const Tensor& t) {
      return feed_forward(t, w.ff, conds[lay.patch(i).request_index]);
    });
    count(4 + attention_groups);
    return patched_residual_add(x1, f);
  }

  /// One denoising step over a CSP batch where each request may sit at a
  /// different step. With a cache, every block runs the patch-level reuse
  /// sequence (partition, evict, predict, masked forward + fill, update).
  CspBatch denoise_step(const CspBatch& batch, std::span<const RequestContext> contexts,
                        CacheManager* cache = nullptr, StepTelemetry* tel = nullptr) const {
    const auto& lay = batch.layout();
    detail::require(contexts.size() == lay.num_requests(), "denoise_step: one context per request required");
    if (!batch.empty()) {
      detail::require(lay.channels() == cfg_.channels, "denoise_step: channel mismatch");
      detail::require(lay.patch_size() % cfg_.attention_stride == 0,
                      "denoise_step: attention stride must divide the patch size");
    }
    for (const auto& ctx : contexts) check_step(ctx.step);
    if (cache) detail::require(cache->num_blocks() == blocks_.size(), "denoise_step: cache/block count mismatch");

    CspBatch x = batch;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      std::vector<std::vector<double>> conds;
      conds.reserve(contexts.size());
      for (const auto& ctx : contexts) conds.push_back(cond_bias(b, ctx));
      if (tel) tel->total_patch_blocks += x.size();
      if (!cache) {
        x = block_forward(b, x, conds, tel);
        continue;
      }
      BlockCache& bc = cache->block(b);
      const SetPartition sets = bc.partition(x);
      bc.evict_expired(sets.expired);
      const Mask mask = cache->predict_reuse(b, x);
      CspBatch out = masked_block_forward(
          x, mask, [&](const CspBatch& in) { return block_forward(b, in, conds, tel); }, bc);
      bc.batched_update(x, out, mask, sets);
      if (tel) tel->skipped_patch_blocks += static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
      x = std::move(out);
    }
    std::vector<Tensor> next;
    next.reserve(batch.size());
    for (std::size_t p = 0; p < batch.size(); ++p) {
      next.push_back(advance(batch.payload(p), x.payload(p), contexts[lay.patch(p).request_index].step));
    }
    return batch.with_payloads(std::move(next));
  }

  /// Full patched generation of requests that all start at step 0.
  std::vector<RequestLatent> generate(std::span<const RequestLatent> requests, std::size_t patch_size,
                                      CacheManager* cache = nullptr, StepTelemetry* tel = nullptr) const {
    CspBatch batch = split(requests, patch_size);
    std::vector<RequestContext> ctx(batch.layout().num_requests());
    for (std::size_t i = 0; i < ctx.size(); ++i) ctx[i].prompt = batch.layout().request(i).request_id;
    for (std::size_t s = 0; s < cfg_.steps; ++s) {
      for (auto& c : ctx) c.step = s;
      batch = denoise_step(batch, ctx, cache, tel);
    }
    return reassemble(batch);
  }

  /// Gaussian initial latent for a request, (C, h, w).
  static Tensor initial_latent(std::uint64_t seed, std::uint64_t request_id, std::size_t channels, std::size_t h,
                               std::size_t w) {
    Rng rng(mix_seed(seed, request_id));
    Tensor z({channels, h, w});
    for (double& v : z.data()) v = rng.normal();
    return z;
  }

 private:
  void check_step(std::size_t step) const {
    detail::require(step < cfg_.steps, "denoise_step: step " + std::to_string(step) + " outside [0, " +
                                           std::to_string(cfg_.steps) + ")");
  }

  Tensor advance(const Tensor& z, const Tensor& out, std::size_t step) const {
    const double eta = 1.0 / static_cast<double>(cfg_.steps - step);
    Tensor next(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) next[i] = z[i] + eta * (out[i] - z[i]);
    return next;
  }

  Linear random_linear(Rng& rng, std::size_t out, std::size_t in) const {
    const double scale = cfg_.weight_scale / std::sqrt(static_cast<double>(in));
    Linear lin{Tensor({out, in}), Tensor({out})};
    for (double& v : lin.weight.data()) v = scale * rng.normal();
    for (double& v : lin.bias.data()) v = 0.1 * rng.normal();
    return lin;
  }

  BlockWeights random_block(Rng& rng) const {
    const std::size_t c = cfg_.channels;
    BlockWeights w;
    w.norm.groups = cfg_.groups;
    w.norm.eps = 1e-5;
    w.norm.gamma.resize(c);
    w.norm.beta.resize(c);
    for (std::size_t i = 0; i < c; ++i) {
      w.norm.gamma[i] = 1.0 + 0.1 * rng.normal();
      w.norm.beta[i] = 0.1 * rng.normal();
    }
    w.conv.kernel_size = 3;
    w.conv.weight = Tensor({c, c, 3, 3});
    w.conv.bias = Tensor({c});
    const double conv_scale = cfg_.weight_scale / std::sqrt(static_cast<double>(9 * c));
    for (double& v : w.conv.weight.data()) v = conv_scale * rng.normal();
    for (double& v : w.conv.bias.data()) v = 0.1 * rng.normal();
    w.mix = random_linear(rng, c, c);
    w.ff.up = random_linear(rng, cfg_.ff_hidden, c);
    w.ff.down = random_linear(rng, c, cfg_.ff_hidden);
    w.attn.query = random_linear(rng, c, c);
    w.attn.key = random_linear(rng, c, c);
    w.attn.value = random_linear(rng, c, c);
    w.attn.out = random_linear(rng, c, c);
    w.cond = random_linear(rng, c, c);
    return w;
  }

  static void zero_linear(Linear& l) {
    for (double& v : l.weight.data()) v = 0.0;
    for (double& v : l.bias.data()) v = 0.0;
  }

  static void zero_block(BlockWeights& w) {
    std::fill(w.norm.gamma.begin(), w.norm.gamma.end(), 0.0);
    std::fill(w.norm.beta.begin(), w.norm.beta.end(), 0.0);
    for (double& v : w.conv.weight.data()) v = 0.0;
    for (double& v : w.conv.bias.data()) v = 0.0;
    for (Linear* l : {&w.mix, &w.ff.up, &w.ff.down, &w.attn.query, &w.attn.key, &w.attn.value, &w.attn.out, &w.cond}) {
      zero_linear(*l);
    }
  }

  ModelConfig cfg_;
  std::vector<BlockWeights> blocks_;
};

}  // namespace mixres
