// Command-line driver: verify, bench, train-predictor, simulate, report, gen-trace.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mixres/mixres.hpp"
#include "mixres_verify/criteria.hpp"

namespace fs = std::filesystem;
using namespace mixres;

namespace {

int run_verify(const std::vector<int>& only) {
  int failed = 0;
  for (const auto& criterion : verify::all_criteria()) {
    const auto r = criterion();
    if (!only.empty() && std::find(only.begin(), only.end(), r.id) == only.end()) continue;
    std::printf("%s\n", verify::format_line(r).c_str());
    std::fflush(stdout);
    failed += r.passed ? 0 : 1;
  }
  std::printf("%d failed\n", failed);
  return failed == 0 ? 0 : 1;
}

// --- bench ------------------------------------------------------------------

struct BenchRow {
  std::string name;
  std::size_t repeats;
  double mean_ms;
  double min_ms;
};

template <typename Fn>
BenchRow measure(std::string name, std::size_t repeats, Fn&& fn) {
  double total = 0.0, best = 1e300;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    total += ms;
    best = std::min(best, ms);
  }
  return {std::move(name), repeats, total / static_cast<double>(repeats), best};
}

Tensor random_tensor(Shape s, Rng& rng) {
  Tensor t(std::move(s));
  for (double& v : t.data()) v = rng.normal();
  return t;
}

int run_bench(std::size_t repeats, const std::string& out_path) {
  Rng rng(1);
  std::vector<BenchRow> rows;
  const ToyModel unet(ModelConfig::test_preset(ModelKind::unet_like));
  const ToyModel dit(ModelConfig::test_preset(ModelKind::dit_like));
  const auto& w = unet.blocks().front();
  const Tensor image = random_tensor({1, 4, 128, 128}, rng);
  std::vector<RequestLatent> reqs;
  for (std::size_t i = 0; i < 6; ++i) {
    const std::size_t side = 64 + 32 * (i % 3);
    reqs.push_back({i, random_tensor({4, side, side}, rng)});
  }
  const CspBatch batch = split(reqs, 32);
  volatile double sink = 0.0;

  rows.push_back(measure("conv2d_128", repeats, [&] { sink = conv2d(image, w.conv).data()[0]; }));
  rows.push_back(measure("group_norm_128", repeats, [&] { sink = group_norm(image, w.norm).data()[0]; }));
  rows.push_back(measure("attention_layer_128", repeats, [&] { sink = attention_layer(image, w.attn, 8).data()[0]; }));
  rows.push_back(measure("stitched_group_norm", repeats, [&] { sink = stitched_group_norm(batch, w.norm).first.size(); }));
  const auto [normed, halo] = stitched_group_norm(batch, w.norm);
  rows.push_back(measure("patched_conv", repeats, [&] { sink = patched_conv(normed, halo, w.conv).size(); }));
  rows.push_back(measure("patched_self_attention", repeats, [&] { sink = patched_self_attention(batch, w.attn, 8).size(); }));
  std::vector<RequestContext> ctx(batch.layout().num_requests());
  rows.push_back(measure("denoise_step_unet", repeats, [&] { sink = unet.denoise_step(batch, ctx).size(); }));
  rows.push_back(measure("denoise_step_dit", repeats, [&] { sink = dit.denoise_step(batch, ctx).size(); }));
  rows.push_back(measure("denoise_step_dit_cached", repeats, [&] {
    CacheManager cache(dit.config().blocks_per_step, PredictorConfig{});
    sink = dit.denoise_step(dit.denoise_step(batch, ctx, &cache), ctx, &cache).size();
  }));

  BlockCache cache;
  const Mask none(batch.size(), false), all(batch.size(), true);
  cache.batched_update(batch, batch, none, cache.partition(batch));
  const MseThresholdPredictor mse(0.1);
  rows.push_back(measure("cache_partition", repeats, [&] { sink = cache.partition(batch).common.size(); }));
  rows.push_back(measure("cache_predict_reuse", repeats, [&] { sink = cache.predict_reuse(batch, mse, {}).size(); }));
  rows.push_back(measure("cache_batched_fill", repeats, [&] { sink = cache.batched_fill(batch, all).size(); }));
  rows.push_back(measure("cache_batched_update", repeats, [&] {
    cache.batched_update(batch, batch, none, cache.partition(batch));
  }));
  (void)sink;

  std::ostringstream os;
  os << "name,repeats,mean_ms,min_ms\n";
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.4f,%.4f\n", r.name.c_str(), r.repeats, r.mean_ms, r.min_ms);
    os << buf;
  }
  if (out_path.empty() || out_path == "-") {
    std::cout << os.str();
  } else {
    std::ofstream(out_path) << os.str();
  }
  return 0;
}

// --- train-predictor -----------------------------------------------------------

int run_train(std::size_t combos, double fraction, std::uint64_t seed, TrainConfig tc, const std::string& out) {
  const CostModelParams params;
  const Dataset d = generate_dataset(combos, fraction, params, seed);
  const MlpPredictor m = train_predictor(d.train, params, tc);
  const double mre = mean_relative_error(m, d.eval);
  std::printf("train %zu, eval %zu, eval MRE %.3f %%\n", d.train.size(), d.eval.size(), 100.0 * mre);
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw InvalidArgument("cannot write '" + out + "'");
    f << m.to_json().dump(1) << '\n';
  }
  return 0;
}

// --- report -----------------------------------------------------------------------

std::vector<SummaryRow> load_any(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read '" + path.string() + "'");
  if (path.extension() == ".jsonl") return {summary_from_events(in, path.stem().string())};
  std::string header;
  std::getline(in, header);
  in.clear();
  in.seekg(0);
  if (detail::trim(header) == kRequestsHeader) {
    const auto rows = read_requests(in);
    return {summary_from_requests(rows, path.stem().string())};
  }
  return read_summary(in);
}

int run_report(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<SummaryRow> rows;
  for (const auto& p : inputs) {
    auto more = load_any(p);
    rows.insert(rows.end(), more.begin(), more.end());
  }
  const auto table = aggregate(rows);
  std::ostringstream os;
  write_summary(os, table);
  if (out.empty() || out == "-") {
    std::cout << os.str();
  } else {
    std::ofstream(out) << os.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-resolution diffusion serving simulator"};
  app.require_subcommand(1);

  auto* verify_cmd = app.add_subcommand("verify", "Run every acceptance check; nonzero exit on failure");
  std::vector<int> only;
  verify_cmd->add_option("--only", only, "Criterion ids to run");

  auto* bench_cmd = app.add_subcommand("bench", "Time kernels and cache operations, CSV output");
  std::size_t repeats = 5;
  std::string bench_out;
  bench_cmd->add_option("--repeats", repeats)->check(CLI::PositiveNumber);
  bench_cmd->add_option("--out", bench_out, "CSV path (default stdout)");

  auto* train_cmd = app.add_subcommand("train-predictor", "Train the step-latency MLP and print eval MRE");
  std::size_t combos = 200;
  double fraction = 0.8;
  std::uint64_t data_seed = verify::kDatasetSeed;
  TrainConfig tc;
  std::string model_out;
  train_cmd->add_option("--combos", combos);
  train_cmd->add_option("--train-fraction", fraction);
  train_cmd->add_option("--data-seed", data_seed);
  train_cmd->add_option("--seed", tc.seed, "Weight init seed");
  train_cmd->add_option("--epochs", tc.epochs);
  train_cmd->add_option("--lr", tc.learning_rate);
  train_cmd->add_option("--out", model_out, "Where to write the model json");

  auto* sim_cmd = app.add_subcommand("simulate", "Run a trace; writes events.jsonl, summary.csv, requests.csv");
  std::string config_path, trace_path, out_dir = "out", policy, plane;
  std::optional<std::size_t> workers;
  std::optional<std::uint64_t> seed;
  sim_cmd->add_option("--config", config_path)->envname("MIXRES_CONFIG");
  sim_cmd->add_option("--trace", trace_path, "Trace JSONL (generated from the config when absent)")
      ->envname("MIXRES_TRACE");
  sim_cmd->add_option("--out-dir", out_dir)->envname("MIXRES_OUT_DIR");
  sim_cmd->add_option("--policy", policy)->envname("MIXRES_POLICY");
  sim_cmd->add_option("--plane", plane)->envname("MIXRES_PLANE");
  sim_cmd->add_option("--workers", workers)->envname("MIXRES_WORKERS");
  sim_cmd->add_option("--seed", seed)->envname("MIXRES_SEED");

  auto* report_cmd = app.add_subcommand("report", "Aggregate summaries (or events/requests logs) into one CSV");
  std::vector<std::string> inputs;
  std::string report_out;
  report_cmd->add_option("inputs", inputs)->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--out", report_out, "CSV path (default stdout)");

  auto* gen_cmd = app.add_subcommand("gen-trace", "Write a Poisson trace as JSONL");
  std::string gen_config, gen_out;
  std::optional<double> gen_qps, gen_horizon, gen_slo;
  std::optional<std::uint64_t> gen_seed;
  std::vector<double> mix;
  gen_cmd->add_option("--config", gen_config)->envname("MIXRES_CONFIG");
  gen_cmd->add_option("--qps", gen_qps);
  gen_cmd->add_option("--horizon", gen_horizon, "Seconds");
  gen_cmd->add_option("--slo-scale", gen_slo);
  gen_cmd->add_option("--seed", gen_seed)->envname("MIXRES_SEED");
  gen_cmd->add_option("--mix", mix, "Weights low medium high")->expected(3);
  gen_cmd->add_option("--out", gen_out, "Trace path (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*verify_cmd) return run_verify(only);
    if (*bench_cmd) return run_bench(repeats, bench_out);
    if (*train_cmd) return run_train(combos, fraction, data_seed, tc, model_out);
    if (*report_cmd) return run_report(inputs, report_out);

    if (*gen_cmd) {
      RunConfig cfg = gen_config.empty() ? RunConfig{} : load_config(gen_config);
      if (gen_qps) cfg.workload.qps = *gen_qps;
      if (gen_horizon) cfg.workload.horizon_s = *gen_horizon;
      if (gen_slo) cfg.workload.slo_scale = *gen_slo;
      if (gen_seed) cfg.workload.seed = *gen_seed;
      if (!mix.empty()) std::copy(mix.begin(), mix.end(), cfg.workload.resolution_mix.begin());
      const auto trace = generate_trace(cfg.workload, cfg.engine.cost, cfg.engine.steps);
      if (gen_out.empty() || gen_out == "-") {
        write_trace(std::cout, trace);
      } else {
        std::ofstream f(gen_out);
        if (!f) throw InvalidArgument("cannot write '" + gen_out + "'");
        write_trace(f, trace);
      }
      std::fprintf(stderr, "%zu requests\n", trace.size());
      return 0;
    }

    // simulate
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (!policy.empty()) cfg.engine.scheduler.policy = parse_policy(policy);
    if (!plane.empty()) cfg.engine.plane = parse_plane(plane);
    if (workers) cfg.engine.workers = *workers;
    if (seed) cfg.engine.seed = cfg.workload.seed = *seed;
    const auto trace = trace_path.empty() ? generate_trace(cfg.workload, cfg.engine.cost, cfg.engine.steps)
                                          : load_trace(trace_path);
    MetricsReport report;
    const auto artifacts = simulate(cfg, trace, &report);
    write_artifacts(out_dir, artifacts);
    std::printf("%zu arrived, %zu done (%zu within SLO), %zu discarded; SLO %.1f %%, goodput %.4f req/s\n",
                report.arrived, report.done, report.done_in_slo, report.discarded, 100.0 * report.slo_satisfaction,
                report.goodput_rps);
    return 0;
  } catch (const InvalidArgument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
