#include <gtest/gtest.h>

#include <set>

#include "mixres_verify/oracles.hpp"
#include "support.hpp"

using namespace mixres;

namespace {

/// Hand-expanded cost model with latent sides 64/96/128 and patch side 32.
double reference_latency(std::size_t l, std::size_t m, std::size_t h) {
  const double n[3] = {double(l), double(m), double(h)};
  const double side[3] = {64, 96, 128};
  double per_block = 0.0;
  int distinct = 0;
  for (int r = 0; r < 3; ++r) {
    if (n[r] == 0) continue;
    ++distinct;
    const double patches = (side[r] / 32) * (side[r] / 32);
    per_block += n[r] * (0.17 * patches + 0.01 * std::pow(side[r] * side[r] / 1000.0, 1.5));
  }
  return 50.0 + 15.0 * distinct + 7.0 * per_block;
}

}  // namespace

TEST(CostModel, MatchesHandExpansion) {
  const CostModelParams p;
  for (std::size_t l = 0; l <= 4; ++l)
    for (std::size_t m = 0; m <= 4; ++m)
      for (std::size_t h = 0; h <= 4; ++h) {
        if (l + m + h == 0) continue;
        EXPECT_NEAR(simulate_step_latency(Composition::of(l, m, h), p), reference_latency(l, m, h), 1e-9);
      }
  EXPECT_THROW(simulate_step_latency(Composition{}, p), InvalidArgument);
}

TEST(CostModel, CalibrationRatios) {
  const CostModelParams p;
  const double a = simulate_step_latency(Composition::of(0, 0, 3), p) / simulate_step_latency(Composition::of(3, 0, 0), p);
  const double seq = simulate_step_latency(Composition::of(1, 0, 0), p) +
                     simulate_step_latency(Composition::of(0, 1, 0), p) +
                     simulate_step_latency(Composition::of(0, 0, 1), p);
  const double b = simulate_step_latency(Composition::of(1, 1, 1), p) / seq;
  EXPECT_GE(a, 1.5);
  EXPECT_LE(a, 1.9);
  EXPECT_GE(b, 0.45);
  EXPECT_LE(b, 0.65);
}

TEST(CostModel, MonotoneInEveryClass) {
  const CostModelParams p;
  for (const auto& c : all_compositions(8)) {
    const double base = simulate_step_latency(c, p);
    for (auto r : kResolutionClasses) EXPECT_GT(simulate_step_latency(c.with(r), p), base);
  }
  EXPECT_GT(simulate_step_latency(Composition::of(0, 0, 1), p), simulate_step_latency(Composition::of(1, 0, 0), p));
}

TEST(CostModel, BatchingBeatsRunningAlone) {
  const CostModelParams p;
  for (const auto& c : all_compositions(6)) {
    if (c.total() < 2) continue;
    double alone = 0.0;
    for (auto r : kResolutionClasses) alone += double(c[r]) * simulate_step_latency(Composition{}.with(r), p);
    EXPECT_LT(simulate_step_latency(c, p), alone) << to_string(c);
  }
}

TEST(CostModel, SkippedPatchBlocksAreCreditedAndClamped) {
  const CostModelParams p;
  const auto c = Composition::of(1, 0, 0);
  const double full = simulate_step_latency(c, p);
  EXPECT_NEAR(full - simulate_step_latency(c, p, 10), 10 * p.c_patch, 1e-12);
  EXPECT_NEAR(simulate_step_latency(c, p, 1000000), full - 7 * 4 * p.c_patch, 1e-9);
  EXPECT_NEAR(standalone_latency(ResolutionClass::high, p, 50), 50 * reference_latency(0, 0, 1), 1e-6);
}

TEST(Dataset, SplitSizesAndDistinctCompositions) {
  const CostModelParams p;
  const Dataset d = generate_dataset(200, 0.8, p, 2024);
  EXPECT_EQ(d.train.size(), 160u);
  EXPECT_EQ(d.eval.size(), 40u);
  std::set<Composition> seen;
  for (const auto* part : {&d.train, &d.eval})
    for (const auto& s : *part) {
      EXPECT_TRUE(seen.insert(s.composition).second);
      EXPECT_LE(s.composition.total(), 12u);
      EXPECT_DOUBLE_EQ(s.latency_ms, simulate_step_latency(s.composition, p));
    }
  EXPECT_EQ(all_compositions(12).size(), count_combinations(12, 3));
  EXPECT_THROW(generate_dataset(1000, 0.8, p, 1), InvalidArgument);
  EXPECT_THROW(generate_dataset(10, 1.0, p, 1), InvalidArgument);
}

TEST(Features, PatchCountAndResolutionCount) {
  const CostModelParams p;
  const auto f = FeatureVector::from(Composition::of(2, 0, 1), p.patches_per_class());
  EXPECT_EQ(f.values(), (std::array<double, 5>{2, 0, 1, 2, 2 * 4 + 16}));
}

TEST(Mlp, LearnsCostModelWithinFivePercent) {
  const CostModelParams p;
  const Dataset d = generate_dataset(200, 0.8, p, 2024);
  const MlpPredictor m = train_predictor(d.train, p);
  EXPECT_LT(mean_relative_error(m, d.eval), 0.05);
  for (const auto& c : all_compositions(12)) EXPECT_GT(m.step_latency_ms(c), 0.0);
}

TEST(Mlp, ConstantTargetIsLearnedExactly) {
  const CostModelParams p;
  std::vector<Sample> s;
  for (const auto& c : all_compositions(4)) s.push_back({c, 100.0});
  TrainConfig cfg;
  cfg.epochs = 300;
  const MlpPredictor m = train_predictor(s, p, cfg);
  EXPECT_LT(mean_relative_error(m, s), 0.01);
}

TEST(Mlp, TrainingIsReproducibleAndSerializable) {
  const CostModelParams p;
  const Dataset d = generate_dataset(60, 0.5, p, 3);
  TrainConfig cfg;
  cfg.epochs = 200;
  const MlpPredictor a = train_predictor(d.train, p, cfg), b = train_predictor(d.train, p, cfg);
  EXPECT_EQ(a.to_json(), b.to_json());
  const MlpPredictor c = MlpPredictor::from_json(nlohmann::json::parse(a.to_json().dump()));
  for (const auto& s : d.eval) EXPECT_DOUBLE_EQ(a.step_latency_ms(s.composition), c.step_latency_ms(s.composition));
  EXPECT_EQ(c.layer_sizes(), (std::vector<std::size_t>{5, 32, 32, 1}));
  auto bad = a.to_json();
  bad["format"] = "other";
  EXPECT_THROW(MlpPredictor::from_json(bad), InvalidArgument);
}

TEST(Mlp, DivergenceIsReported) {
  const CostModelParams p;
  const Dataset d = generate_dataset(40, 0.5, p, 3);
  TrainConfig cfg;
  cfg.learning_rate = 1e300;
  cfg.epochs = 20;
  EXPECT_THROW(train_predictor(d.train, p, cfg), TrainingError);
}

TEST(Combinatorics, KnownValuesAndEnumeration) {
  EXPECT_EQ(count_combinations(1, 1), 1u);
  EXPECT_EQ(count_combinations(3, 3), 19u);
  EXPECT_EQ(count_combinations(12, 3), 454u);
  for (std::size_t m = 1; m <= 12; ++m)
    for (std::size_t n = 1; n <= 3; ++n) EXPECT_EQ(count_combinations(m, n), oracle::enumerate_multisets(m, n));
  EXPECT_THROW(count_combinations(0, 3), InvalidArgument);
  EXPECT_THROW(count_combinations(1u << 20, 40), std::overflow_error);
}
