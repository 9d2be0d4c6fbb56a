#include <gtest/gtest.h>

#include "mixres_verify/oracles.hpp"
#include "support.hpp"

using namespace mixres;

namespace {

const CostModelParams kCost;
const CostModelOracle kOracle(kCost);

RequestMeta make(std::uint64_t id, ResolutionClass r, double arrival, double ddl, std::size_t remaining = 50) {
  RequestMeta m;
  m.id = id;
  m.resolution = r;
  m.arrival_ms = arrival;
  m.ddl_ms = ddl;
  m.sa_ms = standalone_latency(r, kCost, 50);
  m.remaining_steps = remaining;
  return m;
}

class ThrowingPredictor final : public StepLatencyPredictor {
 public:
  double step_latency_ms(const Composition&) const override { throw std::runtime_error("offline"); }
};

class NanPredictor final : public StepLatencyPredictor {
 public:
  double step_latency_ms(const Composition&) const override { return std::nan(""); }
};

}  // namespace

TEST(Slack, WorkedExamples) {
  RequestMeta r;
  r.arrival_ms = 0;
  r.ddl_ms = 200;
  r.sa_ms = 100;
  EXPECT_DOUBLE_EQ(slack(r, 0, 100), 1.0);
  EXPECT_DOUBLE_EQ(slack(r, 100, 100), 0.0);
  r.sa_ms = 0;
  EXPECT_THROW(slack(r, 0, 0), InvalidArgument);
}

TEST(TimeOut, DeadlineBoundaryIsStrict) {
  RequestMeta r;
  r.arrival_ms = 10;
  r.ddl_ms = 90;
  EXPECT_FALSE(time_out(r, 50, 50));
  EXPECT_TRUE(time_out(r, 50.000001, 50));
}

TEST(ScheduleTick, EmptyQueueDoesNothing) {
  const auto t = schedule_tick({}, {}, kOracle, 0, {});
  EXPECT_TRUE(t.admitted.empty());
  EXPECT_TRUE(t.discarded.empty());
}

TEST(ScheduleTick, FeasibleAdmittedInfeasibleDiscarded) {
  const double sa = standalone_latency(ResolutionClass::low, kCost, 50);
  const std::vector<RequestMeta> w{make(1, ResolutionClass::low, 0, 3 * sa), make(2, ResolutionClass::low, 0, 0.5 * sa)};
  const auto t = schedule_tick(w, {}, kOracle, 0, {});
  EXPECT_EQ(t.admitted, (std::vector<std::uint64_t>{1}));
  EXPECT_EQ(t.discarded, (std::vector<std::uint64_t>{2}));
}

TEST(ScheduleTick, RespectsMaxBatch) {
  std::vector<RequestMeta> w;
  for (std::uint64_t i = 0; i < 20; ++i) w.push_back(make(i, ResolutionClass::low, 0, 1e9));
  for (Policy p : {Policy::slo_aware, Policy::fcfs}) {
    SchedulerConfig cfg;
    cfg.policy = p;
    EXPECT_EQ(schedule_tick(w, {}, kOracle, 0, cfg).admitted.size(), 12u);
    cfg.max_batch = 5;
    EXPECT_EQ(schedule_tick(w, std::span(w).first(2), kOracle, 0, cfg).admitted.size(), 3u);
  }
}

TEST(ScheduleTick, FcfsAdmitsInArrivalOrderAndNeverDiscards) {
  const std::vector<RequestMeta> w{make(5, ResolutionClass::high, 30, 1), make(3, ResolutionClass::low, 10, 1),
                                   make(4, ResolutionClass::low, 10, 1)};
  SchedulerConfig cfg;
  cfg.policy = Policy::fcfs;
  const auto t = schedule_tick(w, {}, kOracle, 1000, cfg);
  EXPECT_EQ(t.admitted, (std::vector<std::uint64_t>{3, 4, 5}));
  EXPECT_TRUE(t.discarded.empty());
  cfg.policy = Policy::sequential;
  EXPECT_EQ(schedule_tick(w, {}, kOracle, 1000, cfg).admitted, (std::vector<std::uint64_t>{3}));
  EXPECT_TRUE(schedule_tick(w, std::span(w).first(1), kOracle, 1000, cfg).admitted.empty());
}

TEST(ScheduleTick, MatchesInterpreterOnRandomQueues) {
  Rng rng(99);
  for (int trial = 0; trial < 3000; ++trial) {
    const double now = 1000.0 * rng.uniform();
    std::vector<RequestMeta> waiting, active;
    const std::size_t nw = rng.below(6), na = rng.below(4);
    for (std::size_t i = 0; i < nw + na; ++i) {
      const auto r = kResolutionClasses[rng.below(3)];
      const double sa = standalone_latency(r, kCost, 50);
      auto m = make(i, r, now - 500.0 * rng.uniform(), sa * (0.5 + 4.0 * rng.uniform()), 1 + rng.below(50));
      (i < nw ? waiting : active).push_back(m);
    }
    SchedulerConfig cfg;
    cfg.theta_mode = 4.0 * rng.uniform();
    cfg.max_batch = 1 + rng.below(12);
    const auto got = schedule_tick(waiting, active, kOracle, now, cfg);
    const auto want = oracle::admission_interpreter(waiting, active, kOracle, now, cfg);
    ASSERT_EQ(got.admitted, want.admitted) << "trial " << trial;
    ASSERT_EQ(got.discarded, want.discarded) << "trial " << trial;
  }
}

TEST(ScheduleTick, AdmissionNeverPushesActiveTaskPastDeadline) {
  Rng rng(7);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<RequestMeta> waiting, active;
    for (std::size_t i = 0; i < 6; ++i) {
      const auto r = kResolutionClasses[rng.below(3)];
      auto m = make(i, r, -200.0 * rng.uniform(), standalone_latency(r, kCost, 50) * (0.8 + 2.0 * rng.uniform()),
                    1 + rng.below(50));
      (i < 4 ? waiting : active).push_back(m);
    }
    const auto t = schedule_tick(waiting, active, kOracle, 0, {});
    std::vector<RequestMeta> after = active;
    for (auto id : t.admitted)
      for (const auto& w : waiting)
        if (w.id == id) after.push_back(w);
    Composition before_c, after_c;
    for (const auto& a : active) before_c[a.resolution] += 1;
    for (const auto& a : after) after_c[a.resolution] += 1;
    const double before = simulate_step_latency(before_c, kCost), now_lat = simulate_step_latency(after_c, kCost);
    for (const auto& a : active) {
      if (!time_out(a, before * a.remaining_steps, 0)) {
        EXPECT_FALSE(time_out(a, now_lat * a.remaining_steps, 0));
      }
    }
  }
}

TEST(ScheduleTick, PredictorFailuresSurfaceAsSchedulerError) {
  const std::vector<RequestMeta> w{make(1, ResolutionClass::low, 0, 1e6)};
  EXPECT_THROW(schedule_tick(w, {}, ThrowingPredictor{}, 0, {}), SchedulerError);
  EXPECT_THROW(schedule_tick(w, {}, NanPredictor{}, 0, {}), SchedulerError);
  SchedulerConfig cfg;
  cfg.policy = Policy::fcfs;
  EXPECT_EQ(schedule_tick(w, {}, ThrowingPredictor{}, 0, cfg).admitted.size(), 1u);
}

TEST(Policy, ParseRoundTrip) {
  for (Policy p : {Policy::slo_aware, Policy::fcfs, Policy::sequential}) EXPECT_EQ(parse_policy(to_string(p)), p);
  EXPECT_THROW(parse_policy("edf"), InvalidArgument);
}
