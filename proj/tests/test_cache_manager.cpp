#include <gtest/gtest.h>

#include "mixres_verify/criteria.hpp"
#include "mixres_verify/oracles.hpp"
#include "support.hpp"

using namespace mixres;
using namespace mixres::testing;

namespace {

std::vector<PatchId> ids(std::initializer_list<std::uint64_t> reqs) {
  std::vector<PatchId> out;
  for (auto r : reqs) out.push_back({r, 0});
  return out;
}

CspBatch tiny_batch(Rng& rng, std::vector<std::size_t> sides = {2, 4}) {
  return split(random_requests(rng, 2, sides), 2);
}

CspBatch identity(const CspBatch& b) { return b; }

}  // namespace

TEST(PartitionSets, SpecExample) {
  const auto p = partition_sets(ids({1, 2, 3}), ids({2, 3, 4}));
  EXPECT_EQ(p.common, ids({2, 3}));
  EXPECT_EQ(p.fresh, ids({1}));
  EXPECT_EQ(p.expired, ids({4}));
}

TEST(PartitionSets, EmptyCache) {
  const auto p = partition_sets(ids({3, 1}), {});
  EXPECT_EQ(p.fresh, ids({1, 3}));
  EXPECT_TRUE(p.common.empty());
  EXPECT_TRUE(p.expired.empty());
}

TEST(PartitionSets, DuplicatesRejected) {
  EXPECT_THROW(partition_sets(ids({1, 1}), {}), InvalidArgument);
  EXPECT_THROW(partition_sets({}, ids({2, 2})), InvalidArgument);
}

TEST(PartitionSets, MatchesBruteForceAndSetLaws) {
  for (std::uint64_t s = 0; s < 300; ++s) EXPECT_EQ(verify::partition_mismatch(s), "");
  Rng rng(1);
  std::vector<PatchId> a, b;
  for (std::uint32_t o = 0; o < 20; ++o) {
    if (rng.uniform() < 0.5) a.push_back({0, o});
    if (rng.uniform() < 0.5) b.push_back({0, o});
  }
  const auto p = partition_sets(a, b);
  std::vector<PatchId> in = p.common, cached = p.common;
  in.insert(in.end(), p.fresh.begin(), p.fresh.end());
  cached.insert(cached.end(), p.expired.begin(), p.expired.end());
  std::sort(in.begin(), in.end());
  std::sort(cached.begin(), cached.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(in, a);
  EXPECT_EQ(cached, b);
}

TEST(PredictReuse, EmptyCacheAllFalse) {
  Rng rng(2);
  const CspBatch b = tiny_batch(rng);
  CacheManager cm(1, PredictorConfig{});
  EXPECT_EQ(cm.predict_reuse(0, b), Mask(b.size(), false));
}

TEST(PredictReuse, IdenticalInputWithZeroStreakIsReusable) {
  Rng rng(3);
  const CspBatch b = tiny_batch(rng);
  CacheManager cm(1, PredictorConfig{});
  auto& c = cm.block(0);
  c.batched_update(b, b, Mask(b.size(), false), c.partition(b));
  EXPECT_EQ(cm.predict_reuse(0, b), Mask(b.size(), true));
}

TEST(PredictReuse, MatchesPerPatchMseLoop) {
  Rng rng(4);
  const PredictorConfig cfg{0.5, 3};
  for (int t = 0; t < 20; ++t) {
    const CspBatch b0 = tiny_batch(rng), b1 = b0.with_payloads(tiny_batch(rng).payloads());
    BlockCache c;
    oracle::SequentialCache ref;
    c.batched_update(b0, b0, Mask(b0.size(), false), c.partition(b0));
    ref.update(b0, b0, Mask(b0.size(), false));
    EXPECT_EQ(c.predict_reuse(b1, MseThresholdPredictor(cfg.threshold), cfg), ref.predict(b1, cfg));
  }
}

TEST(PredictorConfig, Validation) {
  EXPECT_THROW(CacheManager(1, PredictorConfig{0.0, 3}), InvalidArgument);
  EXPECT_THROW(CacheManager(1, PredictorConfig{0.1, 0}), InvalidArgument);
}

TEST(BatchedFill, IdentityAndFullReplacement) {
  Rng rng(5);
  const CspBatch b = tiny_batch(rng);
  const CspBatch out = b.with_payloads(tiny_batch(rng).payloads());
  BlockCache c;
  c.batched_update(b, out, Mask(b.size(), false), c.partition(b));
  EXPECT_EQ(c.batched_fill(b, Mask(b.size(), false)).payloads(), b.payloads());
  EXPECT_EQ(c.batched_fill(b, Mask(b.size(), true)).payloads(), out.payloads());
  for (const auto& [id, e] : c.store()) EXPECT_EQ(e.reuse_streak, 1u);
}

TEST(BatchedFill, MissingEntryLeavesStateUntouched) {
  Rng rng(6);
  const CspBatch b = tiny_batch(rng);
  BlockCache c;
  Mask first(b.size(), false);
  first[0] = true;
  c.batched_update(b, b, Mask(b.size(), false), c.partition(b));
  c.evict_expired(std::vector<PatchId>{b.id(3)});
  Mask both = first;
  both[3] = true;
  EXPECT_THROW(c.batched_fill(b, both), IntegrityError);
  EXPECT_EQ(c.find(b.id(0))->reuse_streak, 0u);
}

TEST(BatchedUpdate, FreshBatchFillsStoreAndIsIdempotent) {
  Rng rng(7);
  const CspBatch b = tiny_batch(rng);
  BlockCache c;
  c.batched_update(b, b, Mask(b.size(), false), c.partition(b));
  EXPECT_EQ(c.size(), b.size());
  const auto before = c.store();
  c.batched_update(b, b, Mask(b.size(), false), c.partition(b));
  EXPECT_EQ(c.size(), b.size());
  for (const auto& [id, e] : before) {
    EXPECT_EQ(c.find(id)->input_snapshot, e.input_snapshot);
    EXPECT_EQ(c.find(id)->reuse_streak, 0u);
  }
}

TEST(BatchedUpdate, UncachedIdOutsideNewSetIsIntegrityError) {
  Rng rng(8);
  const CspBatch b = tiny_batch(rng);
  BlockCache c;
  EXPECT_THROW(c.batched_update(b, b, Mask(b.size(), false), SetPartition{}), IntegrityError);
}

TEST(EvictExpired, CountsAndLifecycle) {
  Rng rng(9);
  BlockCache c;
  EXPECT_EQ(c.evict_expired({}), 0u);
  const CspBatch both = tiny_batch(rng, {2, 4});  // request 0: 1 patch, request 1: 4 patches
  c.batched_update(both, both, Mask(both.size(), false), c.partition(both));
  // Request 0 completes: the next partition lists its id as expired.
  const CspBatch rest = split(std::vector<RequestLatent>{{1, random_tensor({2, 4, 4}, rng)}}, 2);
  const auto sets = c.partition(rest);
  ASSERT_EQ(sets.expired.size(), 1u);
  EXPECT_EQ(sets.expired[0].request_id, 0u);
  EXPECT_EQ(c.evict_expired(sets.expired), 1u);
  EXPECT_EQ(c.find(sets.expired[0]), nullptr);
  EXPECT_EQ(c.evict_expired(sets.expired), 0u);
}

TEST(CacheSemantics, RandomTracesMatchSequentialReference) {
  CacheStats total;
  for (std::uint64_t s = 0; s < 50; ++s) {
    CacheStats st;
    EXPECT_EQ(verify::cache_trace_mismatch(s, 16, &st), "") << "seed " << s;
    total += st;
  }
  // The traces must exercise reuse, eviction and partial masks.
  EXPECT_GT(total.hits, 0u);
  EXPECT_GT(total.evictions, 0u);
  EXPECT_GT(total.computed_patches, 0u);
  EXPECT_LT(total.full_skips, total.queries);
}

TEST(CacheSemantics, RecomputeAtLeastEveryRPlusOneSteps) {
  Rng rng(10);
  const CspBatch b = tiny_batch(rng);
  const PredictorConfig cfg{1e9, 3};
  CacheManager cm(1, cfg);
  auto& c = cm.block(0);
  std::vector<std::size_t> since(b.size(), 0);
  for (int step = 0; step < 20; ++step) {
    const auto sets = c.partition(b);
    const Mask mask = cm.predict_reuse(0, b);
    const CspBatch out = masked_block_forward(b, mask, identity, c);
    c.batched_update(b, out, mask, sets);
    for (std::size_t p = 0; p < b.size(); ++p) {
      since[p] = mask[p] ? since[p] + 1 : 0;
      EXPECT_LE(since[p], cfg.max_reuse_streak);
    }
  }
}

TEST(CacheSavings, PatchLevelBeatsWholeImage) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto sv = verify::synthetic_cache_savings(s);
    EXPECT_GE(sv.patch_level, sv.whole_image);
  }
}
