#include <gtest/gtest.h>

#include "support.hpp"

using namespace mixres;
using namespace mixres::testing;

namespace {

ModelConfig small(ModelKind kind, std::uint64_t seed = 0) {
  ModelConfig cfg = ModelConfig::test_preset(kind);
  cfg.blocks_per_step = 3;
  cfg.steps = 4;
  cfg.attention_stride = 4;
  cfg.seed = seed;
  return cfg;
}

std::vector<RequestLatent> small_batch(Rng& rng) { return random_requests(rng, 4, {16, 24, 8, 16, 24}); }

double generation_gap(const ToyModel& m, const std::vector<RequestLatent>& reqs) {
  double worst = 0.0;
  for (const auto& r : m.generate(reqs, 8)) {
    worst = std::max(worst, max_abs_diff(r.latent, m.generate(reqs.at(r.request_id).latent, r.request_id)));
  }
  return worst;
}

}  // namespace

TEST(ModelConfig, DefaultsAndValidation) {
  EXPECT_EQ(ModelConfig::defaults(ModelKind::unet_like).blocks_per_step, 7u);
  EXPECT_EQ(ModelConfig::defaults(ModelKind::dit_like).blocks_per_step, 24u);
  EXPECT_EQ(ModelConfig::defaults(ModelKind::dit_like).steps, 50u);
  EXPECT_EQ(ModelConfig::test_preset(ModelKind::unet_like).steps, 10u);
  ModelConfig bad;
  bad.steps = 0;
  EXPECT_THROW(ToyModel{bad}, InvalidArgument);
  bad = ModelConfig{};
  bad.groups = 3;
  EXPECT_THROW(ToyModel{bad}, InvalidArgument);
  EXPECT_THROW(parse_model_kind("vit"), InvalidArgument);
}

TEST(ToyModel, WeightsArePureFunctionOfSeed) {
  const ToyModel a(small(ModelKind::unet_like, 5)), b(small(ModelKind::unet_like, 5)), c(small(ModelKind::unet_like, 6));
  EXPECT_EQ(a.blocks()[1].conv.weight, b.blocks()[1].conv.weight);
  EXPECT_EQ(a.blocks()[2].attn.out.weight, b.blocks()[2].attn.out.weight);
  EXPECT_NE(a.blocks()[1].conv.weight, c.blocks()[1].conv.weight);
}

TEST(ToyModel, WeightShapesMatchBlockSpec) {
  const ModelConfig cfg = small(ModelKind::unet_like);
  const ToyModel m(cfg);
  ASSERT_EQ(m.blocks().size(), cfg.blocks_per_step);
  for (const auto& w : m.blocks()) {
    EXPECT_EQ(w.conv.weight.shape(), (Shape{cfg.channels, cfg.channels, 3, 3}));
    EXPECT_EQ(w.norm.gamma.size(), cfg.channels);
    EXPECT_EQ(w.ff.up.weight.shape(), (Shape{cfg.ff_hidden, cfg.channels}));
    EXPECT_EQ(w.ff.down.weight.shape(), (Shape{cfg.channels, cfg.ff_hidden}));
    for (const Linear* l : {&w.attn.query, &w.attn.key, &w.attn.value, &w.attn.out, &w.mix, &w.cond})
      EXPECT_EQ(l->weight.shape(), (Shape{cfg.channels, cfg.channels}));
  }
}

TEST(ToyModel, ZeroWeightsKeepZeroLatentsAtZero) {
  for (auto kind : {ModelKind::unet_like, ModelKind::dit_like}) {
    const ToyModel m = ToyModel::zeros(small(kind));
    const Tensor z({4, 16, 16});
    EXPECT_EQ(m.denoise_step(z, {3, 0}), z);
  }
}

TEST(ToyModel, StepOutOfRangeIsRejected) {
  const ToyModel m(small(ModelKind::dit_like));
  const Tensor z({4, 8, 8});
  EXPECT_THROW(m.denoise_step(z, {0, 4}), InvalidArgument);
  const CspBatch b = split(std::vector<RequestLatent>{{0, z}}, 8);
  const std::vector<RequestContext> ctx{{0, 9}};
  EXPECT_THROW(m.denoise_step(b, ctx), InvalidArgument);
}

TEST(ToyModel, DitPatchedGenerationIsBitIdentical) {
  Rng rng(1);
  const ToyModel m(small(ModelKind::dit_like, 3));
  EXPECT_EQ(generation_gap(m, small_batch(rng)), 0.0);
}

TEST(ToyModel, UnetPatchedGenerationWithinTolerance) {
  Rng rng(2);
  const ToyModel m(small(ModelKind::unet_like, 4));
  EXPECT_LT(generation_gap(m, small_batch(rng)), 1e-10);
}

TEST(ToyModel, RequestsAtDifferentStepsShareABatch) {
  Rng rng(3);
  const ToyModel m(small(ModelKind::unet_like, 8));
  const auto reqs = random_requests(rng, 4, {16, 8});
  const CspBatch b = split(reqs, 8);
  std::vector<RequestContext> ctx(2);
  for (std::size_t i = 0; i < 2; ++i) ctx[i] = {b.layout().request(i).request_id, i * 2 + 1};
  const auto out = reassemble(m.denoise_step(b, ctx));
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& r = reqs.at(out[i].request_id);
    EXPECT_LT(max_abs_diff(out[i].latent, m.denoise_step(r.latent, ctx[i])), 1e-10);
  }
}

TEST(ToyModel, GenerationIsDeterministicAndPromptSensitive) {
  Rng rng(4);
  const ToyModel m(small(ModelKind::dit_like, 1));
  const Tensor z = random_tensor({4, 8, 8}, rng);
  EXPECT_EQ(m.generate(z, 7), m.generate(z, 7));
  EXPECT_NE(m.generate(z, 7), m.generate(z, 8));
  EXPECT_EQ(ToyModel::initial_latent(1, 2, 4, 8, 8), ToyModel::initial_latent(1, 2, 4, 8, 8));
}

TEST(ToyModel, LaunchCountDoesNotGrowWithRequests) {
  Rng rng(5);
  const ToyModel m(small(ModelKind::unet_like));
  auto launches = [&](std::size_t n) {
    std::vector<std::size_t> sides(n, 16);
    sides[0] = 8;
    const CspBatch b = split(random_requests(rng, 4, sides), 8);
    std::vector<RequestContext> ctx(n);
    StepTelemetry tel;
    (void)m.denoise_step(b, ctx, nullptr, &tel);
    EXPECT_EQ(tel.block_invocations, m.config().blocks_per_step);
    return tel.kernel_launches;
  };
  EXPECT_EQ(launches(2), launches(12));
}

TEST(ToyModel, CacheThatNeverReusesMatchesNoCache) {
  Rng rng(6);
  const ToyModel m(small(ModelKind::unet_like, 2));
  const auto reqs = small_batch(rng);
  CacheManager cache(m.config().blocks_per_step, PredictorConfig{1e-300, 3});
  StepTelemetry tel;
  const auto with = m.generate(reqs, 8, &cache, &tel);
  const auto without = m.generate(reqs, 8);
  for (std::size_t i = 0; i < with.size(); ++i) EXPECT_EQ(with[i].latent, without[i].latent);
  EXPECT_EQ(tel.skipped_patch_blocks, 0u);
  EXPECT_GT(cache.total_entries(), 0u);
  EXPECT_LE(cache.total_entries(), m.config().blocks_per_step * split(reqs, 8).size());
}

TEST(ToyModel, CacheReuseIsBoundedByStreak) {
  Rng rng(7);
  const auto reqs = random_requests(rng, 4, {16});
  ModelConfig cfg = small(ModelKind::dit_like, 2);
  cfg.steps = 9;
  const ToyModel longer(cfg);
  CacheManager cache(cfg.blocks_per_step, PredictorConfig{1e9, 2});
  StepTelemetry tel;
  (void)longer.generate(reqs, 8, &cache, &tel);
  // Per block and patch: computed at step 0, then at most 2 reuses per recompute.
  const std::size_t patches = 4, blocks = cfg.blocks_per_step;
  EXPECT_EQ(tel.total_patch_blocks, 9 * patches * blocks);
  EXPECT_EQ(tel.skipped_patch_blocks, 6 * patches * blocks);
}
