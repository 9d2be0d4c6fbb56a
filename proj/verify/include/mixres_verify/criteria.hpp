#pragma once

// Acceptance checks, shared by the acceptance test binary and `mixres verify`.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mixres/mixres.hpp"
#include "mixres_verify/oracles.hpp"

namespace mixres::verify {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

/// Arrival rate at which fcfs lands inside the 60-85 % SLO band.
inline constexpr double kSchedulerQps = 0.9;
inline constexpr double kSchedulerHorizonS = 300.0;

namespace detail {

inline std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

/// 1..12 requests with latents drawn from {64, 96, 128}.
inline std::vector<RequestLatent> random_batch(std::uint64_t seed, std::size_t channels) {
  Rng rng(mix_seed(seed, 0xba7c4));
  const std::size_t n = 1 + static_cast<std::size_t>(rng.below(12));
  static constexpr std::size_t kSides[] = {64, 96, 128};
  std::vector<RequestLatent> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t side = kSides[rng.below(3)];
    out.push_back({100 + i, ToyModel::initial_latent(seed, 100 + i, channels, side, side)});
  }
  return out;
}

/// Max deviation of patched no-cache generation from whole-image generation.
inline double patched_generation_deviation(const ToyModel& model, std::span<const RequestLatent> batch) {
  const auto patched = model.generate(batch, 32);
  double worst = 0.0;
  for (const auto& r : batch) {
    const auto it = std::find_if(patched.begin(), patched.end(),
                                 [&](const RequestLatent& p) { return p.request_id == r.request_id; });
    mixres::detail::ensure(it != patched.end(), "patched generation lost a request");
    worst = std::max(worst, max_abs_diff(it->latent, model.generate(r.latent, r.request_id)));
  }
  return worst;
}

template <typename Fn>
CriterionResult timed(int id, std::string name, Fn&& fn) {
  CriterionResult r;
  r.id = id;
  r.name = std::move(name);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    fn(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace detail

inline constexpr std::size_t kEquivalenceBatches = 20;

inline CriterionResult patched_equivalence_attention() {
  return detail::timed(1, "patched equivalence, attention-only (bit-identical)", [](CriterionResult& r) {
    ModelConfig cfg = ModelConfig::test_preset(ModelKind::dit_like);
    double worst = 0.0;
    std::size_t requests = 0;
    for (std::size_t b = 0; b < kEquivalenceBatches; ++b) {
      cfg.seed = b;
      const ToyModel model(cfg);
      const auto batch = detail::random_batch(b, cfg.channels);
      requests += batch.size();
      worst = std::max(worst, detail::patched_generation_deviation(model, batch));
    }
    r.passed = worst == 0.0;
    r.detail = detail::fmt("%.0f batches, %.0f requests, max |diff| = %.3g", kEquivalenceBatches, requests, worst);
  });
}

inline CriterionResult patched_equivalence_conv() {
  return detail::timed(2, "patched equivalence, conv path (< 1e-10)", [](CriterionResult& r) {
    ModelConfig cfg = ModelConfig::test_preset(ModelKind::unet_like);
    double worst = 0.0;
    std::size_t requests = 0;
    for (std::size_t b = 0; b < kEquivalenceBatches; ++b) {
      cfg.seed = b;
      const ToyModel model(cfg);
      const auto batch = detail::random_batch(b, cfg.channels);
      requests += batch.size();
      worst = std::max(worst, detail::patched_generation_deviation(model, batch));
    }
    r.passed = worst < 1e-10;
    r.detail = detail::fmt("%.0f batches, %.0f requests, max |diff| = %.3g", kEquivalenceBatches, requests, worst);
  });
}

/// One randomized step trace of batched cache ops against the per-patch
/// reference. Returns an empty string on agreement; `stats` receives the
/// batched cache counters.
inline std::string cache_trace_mismatch(std::uint64_t seed, std::size_t steps = 12, CacheStats* stats = nullptr) {
  Rng rng(mix_seed(seed, 0xcac4e));
  PredictorConfig cfg;
  cfg.threshold = rng.uniform(0.02, 0.3);
  cfg.max_reuse_streak = 1 + rng.below(4);
  const MseThresholdPredictor predictor(cfg.threshold);
  constexpr std::size_t kPs = 2, kC = 2;
  BlockCache cache;
  oracle::SequentialCache ref;
  std::map<std::uint64_t, std::size_t> resident;  // request id -> grid side
  std::map<PatchId, Tensor> values;
  std::uint64_t next_id = 0;
  auto block = [](const CspBatch& in) {
    std::vector<Tensor> out;
    for (const auto& t : in.payloads()) {
      Tensor o(t.shape());
      for (std::size_t i = 0; i < t.size(); ++i) o.data()[i] = 0.5 * t.data()[i] + std::sin(static_cast<double>(i));
      out.push_back(std::move(o));
    }
    return in.with_payloads(std::move(out));
  };

  for (std::size_t s = 0; s < steps; ++s) {
    for (auto it = resident.begin(); it != resident.end();) {
      it = rng.uniform() < 0.2 ? resident.erase(it) : std::next(it);
    }
    const std::size_t joins = rng.below(3) + (resident.empty() ? 1 : 0);
    for (std::size_t j = 0; j < joins; ++j) resident[next_id++] = 1 + rng.below(2);

    std::vector<RequestShape> shapes;
    for (const auto& [id, side] : resident) shapes.push_back({id, side * kPs, side * kPs});
    auto layout = CspLayout::build(shapes, kPs, kC);
    std::vector<Tensor> payloads;
    for (const auto& rec : layout->patches()) {
      auto [it, fresh] = values.try_emplace(rec.id, Tensor({kC, kPs, kPs}));
      const double jump = rng.uniform() < 0.5 ? 0.05 : 1.0;
      for (double& v : it->second.data()) v = (fresh ? 0.0 : v) + jump * rng.normal();
      payloads.push_back(it->second);
    }
    const CspBatch batch(layout, payloads);

    std::vector<PatchId> in_ids;
    for (const auto& rec : layout->patches()) in_ids.push_back(rec.id);
    const auto cached_ref = ref.ids();
    const SetPartition sets = cache.partition(batch);
    const SetPartition want = oracle::partition(in_ids, cached_ref);
    if (sets.common != want.common || sets.fresh != want.fresh || sets.expired != want.expired)
      return "step " + std::to_string(s) + ": partition differs";
    if (cache.evict_expired(sets.expired) != ref.evict(want.expired))
      return "step " + std::to_string(s) + ": eviction count differs";
    const Mask mask = cache.predict_reuse(batch, predictor, cfg);
    if (mask != ref.predict(batch, cfg)) return "step " + std::to_string(s) + ": mask differs";
    const CspBatch out = masked_block_forward(batch, mask, block, cache);
    const auto want_out = oracle::masked_forward(batch, mask, block, ref);
    if (out.payloads() != want_out) return "step " + std::to_string(s) + ": block outputs differ";
    cache.batched_update(batch, out, mask, sets);
    ref.update(batch, batch.with_payloads(want_out), mask);
    if (!ref.same_state(cache)) return "step " + std::to_string(s) + ": cache state differs";
    if (stats) *stats = cache.stats();
  }
  return {};
}

/// Random id-set pair compared to the membership scan; empty on agreement.
inline std::string partition_mismatch(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x5e75));
  std::vector<PatchId> a, b;
  for (std::uint64_t req = 0; req < 4; ++req)
    for (std::uint32_t o = 0; o < 8; ++o) {
      if (rng.uniform() < 0.4) a.push_back({req, o});
      if (rng.uniform() < 0.4) b.push_back({req, o});
    }
  for (std::size_t i = a.size(); i > 1; --i) std::swap(a[i - 1], a[rng.below(i)]);
  const auto got = partition_sets(a, b);
  const auto want = oracle::partition(a, b);
  if (got.common != want.common || got.fresh != want.fresh || got.expired != want.expired)
    return "pair " + std::to_string(seed) + " differs";
  return {};
}

inline CriterionResult cache_semantics() {
  return detail::timed(3, "cache semantics vs sequential reference", [](CriterionResult& r) {
    std::string problem;
    for (std::uint64_t t = 0; t < 50 && problem.empty(); ++t) problem = cache_trace_mismatch(t);
    for (std::uint64_t t = 0; t < 1000 && problem.empty(); ++t) problem = partition_mismatch(t);
    r.passed = problem.empty();
    r.detail = r.passed ? "50 step traces and 1000 partition pairs agree" : problem;
  });
}

struct CacheSavings {
  double patch_level = 0.0;
  double whole_image = 0.0;
};

/// Synthetic similarity process: every patch independently either jitters
/// (stays under the threshold) or jumps each step. The same input stream is
/// fed through patch-level reuse and through whole-image reuse, which only
/// skips a request when all of its patches qualify.
inline CacheSavings synthetic_cache_savings(std::uint64_t seed, double stay_probability = 0.8,
                                            std::size_t steps = 30, std::size_t blocks = 3) {
  Rng rng(mix_seed(seed, 0x5a71));
  constexpr std::size_t kPs = 4, kC = 2;
  std::vector<RequestShape> shapes;
  for (std::uint64_t id = 0; id < 4; ++id) {
    const std::size_t side = (2 + rng.below(2)) * kPs;
    shapes.push_back({id, side, side});
  }
  const auto layout = CspLayout::build(shapes, kPs, kC);
  std::vector<Tensor> state;
  for (std::size_t p = 0; p < layout->num_patches(); ++p) {
    Tensor t({kC, kPs, kPs});
    for (double& v : t.data()) v = rng.normal();
    state.push_back(std::move(t));
  }
  CacheManager patch_cache(blocks, PredictorConfig{});
  CacheManager image_cache(blocks, PredictorConfig{});
  auto block = [](const CspBatch& in) { return in; };
  std::size_t total = 0, patch_skips = 0, image_skips = 0;

  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t b = 0; b < blocks; ++b) {
      for (auto& t : state) {
        const bool stay = rng.uniform() < stay_probability;
        for (double& v : t.data()) v = stay ? v + 0.01 * rng.normal() : rng.normal() * 2.0;
      }
      const CspBatch in(layout, state);
      total += in.size();

      BlockCache& pc = patch_cache.block(b);
      const auto psets = pc.partition(in);
      pc.evict_expired(psets.expired);
      const Mask pmask = patch_cache.predict_reuse(b, in);
      const CspBatch pout = masked_block_forward(in, pmask, block, pc);
      pc.batched_update(in, pout, pmask, psets);
      patch_skips += static_cast<std::size_t>(std::count(pmask.begin(), pmask.end(), true));

      BlockCache& ic = image_cache.block(b);
      const auto isets = ic.partition(in);
      ic.evict_expired(isets.expired);
      Mask imask = image_cache.predict_reuse(b, in);
      for (std::size_t q = 0; q < layout->num_requests(); ++q) {
        const auto range = layout->patches_of_request(q);
        bool all = true;
        for (std::size_t p = range.begin; p < range.end; ++p) all = all && imask[p];
        for (std::size_t p = range.begin; p < range.end; ++p) imask[p] = all;
      }
      const CspBatch iout = masked_block_forward(in, imask, block, ic);
      ic.batched_update(in, iout, imask, isets);
      image_skips += static_cast<std::size_t>(std::count(imask.begin(), imask.end(), true));
    }
  }
  return {static_cast<double>(patch_skips) / static_cast<double>(total),
          static_cast<double>(image_skips) / static_cast<double>(total)};
}

inline CriterionResult patch_vs_image_caching() {
  return detail::timed(4, "patch-level savings >= whole-image savings", [](CriterionResult& r) {
    std::size_t wins = 0;
    double patch_sum = 0.0, image_sum = 0.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto sv = synthetic_cache_savings(s);
      wins += sv.patch_level >= sv.whole_image ? 1 : 0;
      patch_sum += sv.patch_level;
      image_sum += sv.whole_image;
    }
    r.passed = wins == 20;
    r.detail = detail::fmt("%.0f/20 seeds; mean savings patch %.3f vs whole-image %.3f", wins, patch_sum / 20.0,
                           image_sum / 20.0);
  });
}

inline constexpr std::uint64_t kDatasetSeed = 2024;

inline CriterionResult predictor_accuracy() {
  return detail::timed(5, "MLP eval MRE < 5 %", [](CriterionResult& r) {
    const CostModelParams params;
    const Dataset d = generate_dataset(200, 0.8, params, kDatasetSeed);
    const MlpPredictor m = train_predictor(d.train, params);
    const double mre = mean_relative_error(m, d.eval);
    r.passed = mre < 0.05;
    r.detail = detail::fmt("train %.0f, eval %.0f, eval MRE = %.2f %%", d.train.size(), d.eval.size(), 100.0 * mre);
  });
}

inline CriterionResult cost_model_calibration() {
  return detail::timed(6, "cost-model calibration", [](CriterionResult& r) {
    const CostModelParams p;
    const double hi = simulate_step_latency(Composition::of(0, 0, 3), p);
    const double lo = simulate_step_latency(Composition::of(3, 0, 0), p);
    const double mixed = simulate_step_latency(Composition::of(1, 1, 1), p);
    const double seq = simulate_step_latency(Composition::of(1, 0, 0), p) +
                       simulate_step_latency(Composition::of(0, 1, 0), p) +
                       simulate_step_latency(Composition::of(0, 0, 1), p);
    const double a = hi / lo, b = mixed / seq;
    r.passed = a >= 1.5 && a <= 1.9 && b >= 0.45 && b <= 0.65;
    r.detail = detail::fmt("3H/3L = %.3f (1.5-1.9); concurrent/sequential = %.3f (0.45-0.65)", a, b);
  });
}

struct SchedulerComparison {
  std::vector<double> fcfs;
  std::vector<double> slo_aware;
};

inline SchedulerComparison compare_policies(std::size_t seeds, double qps = kSchedulerQps,
                                            double horizon_s = kSchedulerHorizonS) {
  SchedulerComparison out;
  const CostModelParams cost;
  const CostModelOracle oracle(cost);
  for (std::uint64_t s = 0; s < seeds; ++s) {
    WorkloadConfig w;
    w.qps = qps;
    w.horizon_s = horizon_s;
    w.seed = s;
    const auto trace = generate_trace(w, cost, 50);
    EngineConfig e;
    e.scheduler.policy = Policy::fcfs;
    out.fcfs.push_back(run(trace, e, oracle).slo_satisfaction);
    e.scheduler.policy = Policy::slo_aware;
    out.slo_aware.push_back(run(trace, e, oracle).slo_satisfaction);
  }
  return out;
}

inline CriterionResult scheduler_quality() {
  return detail::timed(7, "slo_aware >= fcfs on >= 27/30 seeds", [](CriterionResult& r) {
    const auto c = compare_policies(30);
    std::size_t wins = 0;
    double f = 0.0, s = 0.0;
    for (std::size_t i = 0; i < c.fcfs.size(); ++i) {
      wins += c.slo_aware[i] >= c.fcfs[i] ? 1 : 0;
      f += c.fcfs[i];
      s += c.slo_aware[i];
    }
    f /= 30.0;
    s /= 30.0;
    r.passed = wins >= 27 && s > f && f >= 0.60 && f <= 0.85;
    r.detail = detail::fmt("qps %.2f: %.0f/30 seeds; mean SLO fcfs %.1f %% vs slo_aware %.1f %%", kSchedulerQps,
                           wins, 100.0 * f, 100.0 * s);
  });
}

inline CriterionResult combinatorics() {
  return detail::timed(8, "count_combinations vs enumeration", [](CriterionResult& r) {
    bool ok = count_combinations(3, 3) == 19;
    for (std::size_t m = 1; m <= 12; ++m)
      for (std::size_t n = 1; n <= 3; ++n) ok = ok && count_combinations(m, n) == oracle::enumerate_multisets(m, n);
    r.passed = ok;
    r.detail = detail::fmt("count_combinations(3,3) = %.0f; M<=12, N<=3 checked", count_combinations(3, 3));
  });
}

/// Two identical simulate runs (cost_only and numeric) must render identical bytes.
inline CriterionResult determinism() {
  return detail::timed(9, "simulate is byte-deterministic", [](CriterionResult& r) {
    bool ok = true;
    for (const Plane plane : {Plane::cost_only, Plane::numeric}) {
      RunConfig cfg;
      cfg.engine.plane = plane;
      cfg.engine.workers = 2;
      cfg.engine.seed = cfg.workload.seed = 11;
      cfg.workload.qps = plane == Plane::numeric ? 2.0 : 1.5;
      cfg.workload.horizon_s = plane == Plane::numeric ? 3.0 : 120.0;
      if (plane == Plane::numeric) cfg.engine.steps = cfg.engine.model.steps;
      const auto trace = generate_trace(cfg.workload, cfg.engine.cost, cfg.engine.steps);
      const auto a = simulate(cfg, trace);
      const auto b = simulate(cfg, trace);
      ok = ok && a.events == b.events && a.summary == b.summary && a.requests == b.requests && !a.events.empty();
    }
    r.passed = ok;
    r.detail = "repeated runs in both planes render identical events, summary and requests";
  });
}

inline std::vector<std::function<CriterionResult()>> all_criteria() {
  return {patched_equivalence_attention, patched_equivalence_conv, cache_semantics, patch_vs_image_caching,
          predictor_accuracy, cost_model_calibration, scheduler_quality, combinatorics, determinism};
}

inline std::string format_line(const CriterionResult& r) {
  char head[64];
  std::snprintf(head, sizeof head, "[%s] %d. ", r.passed ? "PASS" : "FAIL", r.id);
  char tail[32];
  std::snprintf(tail, sizeof tail, " (%.1fs)", r.seconds);
  return head + r.name + ": " + r.detail + tail;
}

}  // namespace mixres::verify
