#include <gtest/gtest.h>

#include <sstream>

#include "mixres_verify/oracles.hpp"
#include "support.hpp"

using namespace mixres;
using namespace mixres::testing;

namespace {

const CostModelParams kCost;
const CostModelOracle kOracle(kCost);

ModelConfig tiny_dit() {
  ModelConfig m = ModelConfig::test_preset(ModelKind::dit_like);
  m.blocks_per_step = 2;
  return m;
}

EngineConfig numeric_config(std::size_t steps) {
  EngineConfig e;
  e.plane = Plane::numeric;
  e.steps = steps;
  e.model = tiny_dit();
  e.keep_latents = true;
  return e;
}

double sa(ResolutionClass r, std::size_t steps = 50) { return standalone_latency(r, kCost, steps); }

ActiveRequest active_request(std::uint64_t id, const Tensor& latent, std::size_t total, std::size_t remaining) {
  ActiveRequest a;
  a.meta.id = id;
  a.meta.resolution = ResolutionClass::low;
  a.meta.remaining_steps = remaining;
  a.meta.sa_ms = 1;
  a.total_steps = total;
  a.latent_side = latent.dim(1);
  a.patches = split(std::vector<RequestLatent>{{id, latent}}, 32).payloads();
  return a;
}

/// Predictor that fails once `budget` similarity checks have been made.
class FailingPredictor final : public ReusePredictor {
 public:
  explicit FailingPredictor(std::size_t budget) : budget_(budget) {}
  bool similar(const Tensor&, const Tensor&) const override {
    if (calls_++ >= budget_) throw IntegrityError("injected failure");
    return true;
  }

 private:
  std::size_t budget_;
  mutable std::size_t calls_ = 0;
};

}  // namespace

TEST(Dispatch, ArgminWithLowestIndexTies) {
  const std::vector<double> one{5.0};
  EXPECT_EQ(dispatch(one), 0u);
  Rng rng(1);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> v(1 + rng.below(6));
    for (double& x : v) x = static_cast<double>(rng.below(4));
    EXPECT_EQ(dispatch(v), oracle::argmin(v));
  }
  EXPECT_THROW(dispatch(std::vector<double>{}), InvalidArgument);
}

TEST(Dispatch, IdleWorkerReceivesRequest) {
  std::vector<WorkerState> ws(3);
  RequestMeta busy;
  busy.resolution = ResolutionClass::high;
  busy.remaining_steps = 10;
  ws[0].waiting.push_back(busy);
  ws[2].waiting.push_back(busy);
  EXPECT_EQ(dispatch(RequestMeta{}, ws, kOracle), 1u);
  EXPECT_DOUBLE_EQ(predicted_outstanding_ms(ws[0], kOracle), 10 * simulate_step_latency(Composition::of(0, 0, 1), kCost));
}

TEST(Simulator, EmptyTraceYieldsEmptyReport) {
  const auto r = run({}, EngineConfig{}, kOracle);
  EXPECT_EQ(r.arrived, 0u);
  EXPECT_TRUE(r.events.empty());
  EXPECT_EQ(r.slo_satisfaction, 0.0);
  EXPECT_EQ(r.goodput_rps, 0.0);
}

TEST(Simulator, SingleFeasibleRequestMeetsItsSlo) {
  const std::vector<TraceRow> trace{{7, 100.0, ResolutionClass::medium, 2 * sa(ResolutionClass::medium)}};
  const auto r = run(trace, EngineConfig{}, kOracle);
  ASSERT_EQ(r.requests.size(), 1u);
  EXPECT_EQ(r.done_in_slo, 1u);
  EXPECT_DOUBLE_EQ(r.slo_satisfaction, 1.0);
  EXPECT_NEAR(r.requests[0].finish_ms, 100.0 + sa(ResolutionClass::medium), 1e-6);
  EXPECT_EQ(r.steps_executed, 50u);
}

TEST(Simulator, InvalidTracesRejected) {
  const EngineConfig e;
  EXPECT_THROW(run(std::vector<TraceRow>{{1, 5, ResolutionClass::low, 0}}, e, kOracle), InvalidArgument);
  EXPECT_THROW(run(std::vector<TraceRow>{{1, 5, ResolutionClass::low, 1}, {2, 4, ResolutionClass::low, 1}}, e, kOracle),
               InvalidArgument);
  EXPECT_THROW(run(std::vector<TraceRow>{{1, 5, ResolutionClass::low, 1}, {1, 6, ResolutionClass::low, 1}}, e, kOracle),
               InvalidArgument);
  EngineConfig bad;
  bad.workers = 0;
  EXPECT_THROW(run({}, bad, kOracle), InvalidArgument);
}

TEST(Simulator, ConservationAndStepTiming) {
  WorkloadConfig w;
  w.qps = 1.5;
  w.horizon_s = 120;
  w.seed = 4;
  const auto trace = generate_trace(w, kCost, 50);
  for (Policy p : {Policy::slo_aware, Policy::fcfs, Policy::sequential}) {
    EngineConfig e;
    e.workers = 2;
    e.scheduler.policy = p;
    const auto r = run(trace, e, kOracle);
    EXPECT_EQ(r.arrived, trace.size());
    EXPECT_EQ(r.done + r.discarded, r.arrived);
    EXPECT_LE(r.done_in_slo, r.done);
    std::map<std::size_t, double> worker_free;
    std::map<std::uint64_t, int> admits;
    std::size_t arrivals = 0;
    for (const auto& ev : r.events) {
      const auto kind = ev.at("event").get<std::string>();
      arrivals += kind == "arrival";
      if (kind == "admit") ++admits[ev.at("request").get<std::uint64_t>()];
      if (kind != "step") continue;
      const auto c = Composition::of(ev.at("low"), ev.at("medium"), ev.at("high"));
      EXPECT_LE(c.total(), p == Policy::sequential ? 1u : 12u);
      EXPECT_DOUBLE_EQ(ev.at("latency_ms").get<double>(), simulate_step_latency(c, kCost));
      EXPECT_DOUBLE_EQ(ev.at("t_ms").get<double>(), ev.at("t_start_ms").get<double>() + ev.at("latency_ms").get<double>());
      const auto wid = ev.at("worker").get<std::size_t>();
      EXPECT_GE(ev.at("t_start_ms").get<double>(), worker_free[wid]);
      worker_free[wid] = ev.at("t_ms").get<double>();
    }
    EXPECT_EQ(arrivals, trace.size());
    for (const auto& [id, n] : admits) EXPECT_EQ(n, 1);
    if (p == Policy::fcfs || p == Policy::sequential) {
      EXPECT_EQ(r.discarded, 0u);
    }
  }
}

TEST(Simulator, EventsAreTimeOrderedPerWorker) {
  WorkloadConfig w;
  w.qps = 2;
  w.horizon_s = 60;
  const auto r = run(generate_trace(w), EngineConfig{}, kOracle);
  double last = 0;
  for (const auto& ev : r.events) {
    EXPECT_GE(ev.at("t_ms").get<double>(), last);
    last = ev.at("t_ms").get<double>();
  }
  EXPECT_DOUBLE_EQ(r.horizon_ms, last);
}

TEST(Simulator, SloAwareBeatsFcfsOnOverloadBurst) {
  std::vector<TraceRow> trace;
  for (std::uint64_t i = 0; i < 12; ++i) trace.push_back({i, 0.0, ResolutionClass::high, 1.2 * sa(ResolutionClass::high)});
  EngineConfig e;
  e.scheduler.policy = Policy::fcfs;
  const auto fcfs = run(trace, e, kOracle);
  e.scheduler.policy = Policy::slo_aware;
  const auto slo = run(trace, e, kOracle);
  EXPECT_EQ(fcfs.done_in_slo, 0u);
  EXPECT_GE(slo.done_in_slo, 1u);
}

TEST(Engine, WorkerStepMatchesWholeImageStep) {
  Rng rng(2);
  const EngineConfig cfg = numeric_config(5);
  ModelConfig mc = cfg.model;
  mc.steps = 5;
  const ToyModel model(mc);
  const Tensor z = random_tensor({4, 64, 64}, rng);
  WorkerState w;
  w.active.push_back(active_request(3, z, 5, 4));
  w.clock_ms = 10;
  const StepEnv env{&cfg, &model, 32};
  StepPlan plan = begin_step(w, env);
  const Tensor expect = model.denoise_step(z, {3, 1});
  EXPECT_EQ(plan.next_patches.at(0), split(std::vector<RequestLatent>{{3, expect}}, 32).payloads());
  const double lat = plan.latency_ms;
  EXPECT_DOUBLE_EQ(lat, simulate_step_latency(Composition::of(1, 0, 0), cfg.cost));
  const auto events = finish_step(w, std::move(plan), env);
  EXPECT_DOUBLE_EQ(w.clock_ms, 10 + lat);
  EXPECT_EQ(w.active.at(0).meta.remaining_steps, 3u);
  EXPECT_EQ(events.size(), 1u);
}

TEST(Engine, FailedStepRollsBackCache) {
  Rng rng(3);
  EngineConfig cfg = numeric_config(4);
  ModelConfig mc = cfg.model;
  mc.steps = 4;
  const ToyModel model(mc);
  WorkerState w;
  w.active.push_back(active_request(1, random_tensor({4, 64, 64}, rng), 4, 4));
  w.active.push_back(active_request(2, random_tensor({4, 64, 64}, rng), 4, 4));
  // Empty caches are never consulted, so the failure lands on block 1 of the
  // second step after block 0 has already reused all 8 patches.
  w.cache.emplace(2, PredictorConfig{}, std::make_shared<FailingPredictor>(8));
  const StepEnv env{&cfg, &model, 32};
  finish_step(w, begin_step(w, env), env);
  const auto before_active = w.active;
  std::vector<BlockCache::Store> stores;
  std::vector<CacheStats> stats;
  for (std::size_t b = 0; b < 2; ++b) {
    stores.push_back(w.cache->block(b).store());
    stats.push_back(w.cache->block(b).stats());
  }
  EXPECT_THROW(begin_step(w, env), IntegrityError);
  for (std::size_t b = 0; b < 2; ++b) {
    EXPECT_EQ(w.cache->block(b).store(), stores[b]);
    EXPECT_EQ(w.cache->block(b).stats(), stats[b]);
  }
  ASSERT_EQ(w.active.size(), before_active.size());
  for (std::size_t i = 0; i < w.active.size(); ++i) EXPECT_EQ(w.active[i].patches, before_active[i].patches);
}

TEST(Engine, NumericPlaneWithoutCacheMatchesWholeImageGeneration) {
  EngineConfig cfg = numeric_config(3);
  cfg.cache_enabled = false;
  cfg.seed = 9;
  const std::vector<TraceRow> trace{{4, 0.0, ResolutionClass::low, 1e9}, {5, 0.0, ResolutionClass::medium, 1e9}};
  const auto r = run(trace, cfg, kOracle);
  ModelConfig mc = cfg.model;
  mc.steps = 3;
  const ToyModel model(mc);
  ASSERT_EQ(r.final_latents.size(), 2u);
  for (const auto& row : trace) {
    const std::size_t side = Resolution::of(row.resolution).latent_height();
    const Tensor z = ToyModel::initial_latent(9, row.request_id, mc.channels, side, side);
    EXPECT_EQ(r.final_latents.at(row.request_id), model.generate(z, row.request_id));
  }
  // The first arrival starts alone, so the shared steps mix step indices.
  std::size_t shared = 0;
  for (const auto& ev : r.events) shared += ev.at("event") == "step" && ev.at("batch").get<std::size_t>() == 2;
  EXPECT_GT(shared, 0u);
}

TEST(Engine, CompletedRequestsLeaveTheCache) {
  EngineConfig cfg = numeric_config(4);
  const double step = simulate_step_latency(Composition::of(1, 0, 0), cfg.cost);
  const std::vector<TraceRow> trace{{1, 0.0, ResolutionClass::low, 1e9}, {2, 1.5 * step, ResolutionClass::low, 1e9}};
  Simulator sim(cfg, kOracle);
  const auto r = sim.run(trace);
  EXPECT_EQ(r.done, 2u);
  EXPECT_GT(r.cache.evictions, 0u);
  const auto& cache = *sim.workers().at(0).cache;
  for (std::size_t b = 0; b < cache.num_blocks(); ++b)
    for (const auto& id : cache.block(b).ids()) EXPECT_EQ(id.request_id, 2u);
  EXPECT_GT(r.total_patch_blocks, 0u);
  EXPECT_LE(r.skipped_patch_blocks, r.total_patch_blocks);
}

TEST(Engine, NumericClockCreditsSkippedWork) {
  EngineConfig cfg = numeric_config(6);
  cfg.cache.threshold = 1e9;
  const std::vector<TraceRow> trace{{1, 0.0, ResolutionClass::low, 1e9}};
  const auto r = run(trace, cfg, kOracle);
  double total = 0;
  for (const auto& ev : r.events) {
    if (ev.at("event") != "step") continue;
    const auto skipped = ev.at("skipped_patch_blocks").get<std::size_t>();
    EXPECT_DOUBLE_EQ(ev.at("latency_ms").get<double>(), simulate_step_latency(Composition::of(1, 0, 0), cfg.cost, skipped));
    total += ev.at("latency_ms").get<double>();
  }
  EXPECT_GT(r.skipped_patch_blocks, 0u);
  EXPECT_NEAR(r.requests.at(0).finish_ms, total, 1e-9);
  EXPECT_LT(total, 6 * simulate_step_latency(Composition::of(1, 0, 0), cfg.cost));
}

TEST(Metrics, RecomputableFromArtifacts) {
  RunConfig cfg;
  cfg.workload.qps = 1.5;
  cfg.workload.horizon_s = 120;
  cfg.engine.workers = 2;
  const auto trace = generate_trace(cfg.workload, cfg.engine.cost, cfg.engine.steps);
  MetricsReport report;
  const auto a = simulate(cfg, trace, &report);
  std::istringstream req(a.requests), ev(a.events), sum(a.summary);
  const auto rows = read_requests(req);
  const auto from_req = summary_from_requests(rows, "r");
  const auto from_ev = summary_from_events(ev, "e");
  const auto summary = read_summary(sum).at(0);
  for (const SummaryRow* s : {&from_req, &from_ev, &summary}) {
    EXPECT_EQ(s->arrived, report.arrived);
    EXPECT_EQ(s->done, report.done);
    EXPECT_EQ(s->done_in_slo, report.done_in_slo);
    EXPECT_EQ(s->discarded, report.discarded);
    EXPECT_NEAR(s->slo_pct, 100.0 * report.slo_satisfaction, 1e-4);
    EXPECT_NEAR(s->goodput_rps, report.goodput_rps, 1e-4);
  }
  EXPECT_NEAR(from_req.mean_latency_ms, from_ev.mean_latency_ms, 1e-3);
  EXPECT_EQ(from_ev.workers, 2u);
}
