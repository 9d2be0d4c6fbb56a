#pragma once

// Workload generation, trace files, the flat key = value config, and the
// metrics artifacts (events JSONL, summary and per-request CSV).

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mixres/error.hpp"
#include "mixres/latency_model.hpp"
#include "mixres/rng.hpp"
#include "mixres/serving_engine.hpp"

namespace mixres {

struct WorkloadConfig {
  double qps = 1.0;
  double horizon_s = 60.0;
  std::array<double, 3> resolution_mix{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  std::uint64_t seed = 0;
  double slo_scale = 5.0;

  void validate() const {
    detail::require(std::isfinite(qps) && qps > 0.0, "workload: qps must be > 0");
    detail::require(std::isfinite(horizon_s) && horizon_s >= 0.0, "workload: horizon must be >= 0");
    detail::require(slo_scale > 0.0, "workload: slo_scale must be > 0");
    double sum = 0.0;
    for (double w : resolution_mix) {
      detail::require(w >= 0.0, "workload: mix weights must be non-negative");
      sum += w;
    }
    detail::require(std::abs(sum - 1.0) < 1e-9, "workload: mix weights must sum to 1");
  }
};

/// Poisson arrivals over [0, horizon); SLO window = slo_scale x standalone latency.
inline std::vector<TraceRow> generate_trace(const WorkloadConfig& cfg, const CostModelParams& cost = {},
                                            std::size_t steps = 50) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, 0x747261636555ULL));
  const double horizon_ms = cfg.horizon_s * 1000.0;
  const double mean_gap_ms = 1000.0 / cfg.qps;
  std::vector<TraceRow> rows;
  double t = 0.0;
  while (true) {
    t += rng.exponential(mean_gap_ms);
    if (t >= horizon_ms) break;
    const double u = rng.uniform();
    ResolutionClass r = ResolutionClass::high;
    double acc = 0.0;
    for (auto c : kResolutionClasses) {
      acc += cfg.resolution_mix[static_cast<std::size_t>(c)];
      if (u < acc && cfg.resolution_mix[static_cast<std::size_t>(c)] > 0.0) {
        r = c;
        break;
      }
    }
    if (cfg.resolution_mix[static_cast<std::size_t>(r)] == 0.0) {
      // Rounding left u past the last non-zero weight.
      for (auto c : kResolutionClasses) {
        if (cfg.resolution_mix[static_cast<std::size_t>(c)] > 0.0) r = c;
      }
    }
    rows.push_back({rows.size(), t, r, cfg.slo_scale * standalone_latency(r, cost, steps)});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Trace JSONL

inline nlohmann::ordered_json to_json(const TraceRow& r) {
  return {{"request_id", r.request_id},
          {"arrival_ms", r.arrival_ms},
          {"resolution", to_string(r.resolution)},
          {"slo_ms", r.slo_ms}};
}

inline void write_trace(std::ostream& os, std::span<const TraceRow> rows) {
  for (const auto& r : rows) os << to_json(r).dump() << '\n';
}

/// Reads a trace; every malformed line is reported in one InvalidArgument.
inline std::vector<TraceRow> read_trace(std::istream& is) {
  std::vector<TraceRow> rows;
  std::vector<std::string> problems;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TraceRow r;
      r.request_id = j.at("request_id").get<std::uint64_t>();
      r.arrival_ms = j.at("arrival_ms").get<double>();
      r.resolution = parse_resolution_class(j.at("resolution").get<std::string>());
      r.slo_ms = j.at("slo_ms").get<double>();
      detail::require(std::isfinite(r.arrival_ms) && r.arrival_ms >= 0.0, "arrival_ms must be finite and >= 0");
      detail::require(std::isfinite(r.slo_ms) && r.slo_ms > 0.0, "slo_ms must be > 0");
      if (!rows.empty() && r.arrival_ms < rows.back().arrival_ms) throw InvalidArgument("arrival_ms decreases");
      rows.push_back(r);
    } catch (const std::exception& e) {
      problems.push_back("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = "malformed trace (" + std::to_string(problems.size()) + " bad line(s))";
    for (const auto& p : problems) msg += "\n  " + p;
    throw InvalidArgument(msg);
  }
  return rows;
}

inline std::vector<TraceRow> load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read trace file '" + path + "'");
  return read_trace(in);
}

// ---------------------------------------------------------------------------
// Config file

/// Everything a simulate run needs. Keys are listed in the README.
struct RunConfig {
  WorkloadConfig workload;
  EngineConfig engine;
  std::string predictor = "oracle";  // "oracle" or path to a trained MLP json

  RunConfig() { engine.model = ModelConfig::test_preset(ModelKind::dit_like); }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == v.size() && !v.empty(), "config: key '" + key + "' expects a number, got '" + v + "'");
  return d;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t n = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
  require(ec == std::errc() && p == v.data() + v.size() && !v.empty(),
          "config: key '" + key + "' expects a non-negative integer, got '" + v + "'");
  return n;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw InvalidArgument("config: key '" + key + "' expects true/false, got '" + v + "'");
}

}  // namespace detail

/// Applies one key; unknown keys are rejected.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_uint;
  auto& e = c.engine;
  auto& w = c.workload;
  auto& m = e.model;
  const std::map<std::string, std::function<void(const std::string&)>> setters = {
      {"policy", [&](const std::string& v) { e.scheduler.policy = parse_policy(v); }},
      {"plane", [&](const std::string& v) { e.plane = parse_plane(v); }},
      {"workers", [&](const std::string& v) { e.workers = parse_uint(key, v); }},
      {"seed", [&](const std::string& v) { e.seed = w.seed = parse_uint(key, v); }},
      {"steps", [&](const std::string& v) { e.steps = parse_uint(key, v); }},
      {"max_batch", [&](const std::string& v) { e.scheduler.max_batch = parse_uint(key, v); }},
      {"theta_mode", [&](const std::string& v) { e.scheduler.theta_mode = parse_double(key, v); }},
      {"slo_scale", [&](const std::string& v) { w.slo_scale = parse_double(key, v); }},
      {"qps", [&](const std::string& v) { w.qps = parse_double(key, v); }},
      {"horizon_s", [&](const std::string& v) { w.horizon_s = parse_double(key, v); }},
      {"mix_low", [&](const std::string& v) { w.resolution_mix[0] = parse_double(key, v); }},
      {"mix_medium", [&](const std::string& v) { w.resolution_mix[1] = parse_double(key, v); }},
      {"mix_high", [&](const std::string& v) { w.resolution_mix[2] = parse_double(key, v); }},
      {"predictor", [&](const std::string& v) { c.predictor = v; }},
      {"keep_latents", [&](const std::string& v) { e.keep_latents = parse_bool(key, v); }},
      {"cache_enabled", [&](const std::string& v) { e.cache_enabled = parse_bool(key, v); }},
      {"cache_threshold", [&](const std::string& v) { e.cache.threshold = parse_double(key, v); }},
      {"cache_max_reuse_streak", [&](const std::string& v) { e.cache.max_reuse_streak = parse_uint(key, v); }},
      {"model_kind",
       [&](const std::string& v) {
         const auto kind = parse_model_kind(v);
         if (kind != m.kind) {
           const auto seed = m.seed;
           m = ModelConfig::test_preset(kind);
           m.seed = seed;
         }
       }},
      {"model_blocks", [&](const std::string& v) { m.blocks_per_step = parse_uint(key, v); }},
      {"model_channels", [&](const std::string& v) { m.channels = parse_uint(key, v); }},
      {"model_groups", [&](const std::string& v) { m.groups = parse_uint(key, v); }},
      {"model_ff_hidden", [&](const std::string& v) { m.ff_hidden = parse_uint(key, v); }},
      {"model_attention_stride", [&](const std::string& v) { m.attention_stride = parse_uint(key, v); }},
      {"model_weight_scale", [&](const std::string& v) { m.weight_scale = parse_double(key, v); }},
      {"model_seed", [&](const std::string& v) { m.seed = parse_uint(key, v); }},
      {"c_patch", [&](const std::string& v) { e.cost.c_patch = parse_double(key, v); }},
      {"attn_alpha", [&](const std::string& v) { e.cost.attn_alpha = parse_double(key, v); }},
      {"attn_exponent", [&](const std::string& v) { e.cost.attn_exponent = parse_double(key, v); }},
      {"c_res_overhead", [&](const std::string& v) { e.cost.c_res_overhead = parse_double(key, v); }},
      {"c_step_fixed", [&](const std::string& v) { e.cost.c_step_fixed = parse_double(key, v); }},
      {"blocks_per_step", [&](const std::string& v) { e.cost.blocks_per_step = parse_uint(key, v); }},
      {"downsample", [&](const std::string& v) { e.cost.downsample = parse_uint(key, v); }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw InvalidArgument("config: unknown key '" + key + "'");
  it->second(value);
}

/// Parses `key = value` lines; '#' starts a comment.
inline RunConfig parse_config(std::istream& is, RunConfig base = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    detail::require(eq != std::string::npos, "config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    try {
      set_config_value(base, key, value);
    } catch (const InvalidArgument& e) {
      throw InvalidArgument("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read config file '" + path + "'");
  return parse_config(in, std::move(base));
}

// ---------------------------------------------------------------------------
// Metrics artifacts

inline void write_events(std::ostream& os, std::span<const Event> events) {
  for (const auto& e : events) os << e.dump() << '\n';
}

namespace detail {

inline std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

struct SummaryRow {
  std::string policy;
  std::string plane;
  std::size_t workers = 0;
  double qps = 0.0;
  double horizon_s = 0.0;
  std::size_t arrived = 0;
  std::size_t done = 0;
  std::size_t done_in_slo = 0;
  std::size_t discarded = 0;
  double slo_pct = 0.0;
  double goodput_rps = 0.0;
  double cache_savings = 0.0;
  double mean_latency_ms = 0.0;
};

inline constexpr std::string_view kSummaryHeader =
    "policy,plane,workers,qps,horizon_s,arrived,done,done_in_slo,discarded,slo_pct,goodput_rps,cache_savings,"
    "mean_latency_ms";

inline SummaryRow summarize(const MetricsReport& r, const EngineConfig& cfg, double qps) {
  SummaryRow s;
  s.policy = to_string(cfg.scheduler.policy);
  s.plane = to_string(cfg.plane);
  s.workers = cfg.workers;
  s.qps = qps;
  s.horizon_s = r.horizon_ms / 1000.0;
  s.arrived = r.arrived;
  s.done = r.done;
  s.done_in_slo = r.done_in_slo;
  s.discarded = r.discarded;
  s.slo_pct = 100.0 * r.slo_satisfaction;
  s.goodput_rps = r.goodput_rps;
  s.cache_savings = r.cache_savings();
  double total = 0.0;
  for (const auto& o : r.requests) {
    if (o.state == RequestState::done) total += o.finish_ms - o.arrival_ms;
  }
  s.mean_latency_ms = r.done == 0 ? 0.0 : total / static_cast<double>(r.done);
  return s;
}

inline void write_summary(std::ostream& os, std::span<const SummaryRow> rows) {
  using detail::fixed;
  os << kSummaryHeader << '\n';
  for (const auto& s : rows) {
    os << s.policy << ',' << s.plane << ',' << s.workers << ',' << fixed(s.qps) << ',' << fixed(s.horizon_s) << ','
       << s.arrived << ',' << s.done << ',' << s.done_in_slo << ',' << s.discarded << ',' << fixed(s.slo_pct) << ','
       << fixed(s.goodput_rps) << ',' << fixed(s.cache_savings) << ',' << fixed(s.mean_latency_ms) << '\n';
  }
}

inline std::vector<SummaryRow> read_summary(std::istream& is) {
  std::string line;
  detail::require(static_cast<bool>(std::getline(is, line)), "summary: missing header");
  detail::require(detail::trim(line) == kSummaryHeader, "summary: unexpected header '" + detail::trim(line) + "'");
  std::vector<SummaryRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto c = detail::split_csv(line);
    const std::string where = "summary line " + std::to_string(lineno);
    detail::require(c.size() == 13, where + ": expected 13 columns, got " + std::to_string(c.size()));
    SummaryRow s;
    s.policy = c[0];
    s.plane = c[1];
    s.workers = detail::parse_uint(where + " workers", c[2]);
    s.qps = detail::parse_double(where + " qps", c[3]);
    s.horizon_s = detail::parse_double(where + " horizon_s", c[4]);
    s.arrived = detail::parse_uint(where + " arrived", c[5]);
    s.done = detail::parse_uint(where + " done", c[6]);
    s.done_in_slo = detail::parse_uint(where + " done_in_slo", c[7]);
    s.discarded = detail::parse_uint(where + " discarded", c[8]);
    s.slo_pct = detail::parse_double(where + " slo_pct", c[9]);
    s.goodput_rps = detail::parse_double(where + " goodput_rps", c[10]);
    s.cache_savings = detail::parse_double(where + " cache_savings", c[11]);
    s.mean_latency_ms = detail::parse_double(where + " mean_latency_ms", c[12]);
    rows.push_back(s);
  }
  return rows;
}

inline constexpr std::string_view kRequestsHeader =
    "request_id,resolution,worker,arrival_ms,deadline_ms,admit_ms,finish_ms,state,met_slo";

inline void write_requests(std::ostream& os, std::span<const RequestOutcome> rows) {
  using detail::fixed;
  os << kRequestsHeader << '\n';
  for (const auto& o : rows) {
    os << o.id << ',' << to_string(o.resolution) << ',' << o.worker << ',' << fixed(o.arrival_ms) << ','
       << fixed(o.deadline_ms) << ',' << (o.admit_ms ? fixed(*o.admit_ms) : std::string()) << ','
       << fixed(o.finish_ms) << ',' << to_string(o.state) << ',' << (o.met_slo ? 1 : 0) << '\n';
  }
}

/// Per-request log row as read back from requests.csv.
struct RequestLogRow {
  std::uint64_t id = 0;
  double arrival_ms = 0.0;
  double deadline_ms = 0.0;
  double finish_ms = 0.0;
  std::string state;
  bool met_slo = false;
};

inline std::vector<RequestLogRow> read_requests(std::istream& is) {
  std::string line;
  detail::require(static_cast<bool>(std::getline(is, line)) && detail::trim(line) == kRequestsHeader,
                  "requests: unexpected header");
  std::vector<RequestLogRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto c = detail::split_csv(line);
    const std::string where = "requests line " + std::to_string(lineno);
    detail::require(c.size() == 9, where + ": expected 9 columns");
    rows.push_back({detail::parse_uint(where, c[0]), detail::parse_double(where, c[3]),
                    detail::parse_double(where, c[4]), detail::parse_double(where, c[6]), c[7],
                    detail::parse_bool(where, c[8])});
  }
  return rows;
}

/// Summary recomputed from the per-request log.
inline SummaryRow summary_from_requests(std::span<const RequestLogRow> rows, std::string label) {
  SummaryRow s;
  s.policy = std::move(label);
  s.plane = "-";
  double horizon = 0.0, latency = 0.0;
  for (const auto& r : rows) {
    ++s.arrived;
    horizon = std::max({horizon, r.finish_ms, r.arrival_ms});
    if (r.state == "done") {
      ++s.done;
      latency += r.finish_ms - r.arrival_ms;
    }
    if (r.state == "discarded") ++s.discarded;
    if (r.met_slo) ++s.done_in_slo;
  }
  s.horizon_s = horizon / 1000.0;
  s.slo_pct = s.arrived == 0 ? 0.0 : 100.0 * static_cast<double>(s.done_in_slo) / static_cast<double>(s.arrived);
  s.goodput_rps = horizon <= 0.0 ? 0.0 : static_cast<double>(s.done_in_slo) / s.horizon_s;
  s.mean_latency_ms = s.done == 0 ? 0.0 : latency / static_cast<double>(s.done);
  return s;
}

/// Summary recomputed from an events log.
inline SummaryRow summary_from_events(std::istream& is, std::string label) {
  SummaryRow s;
  s.policy = std::move(label);
  s.plane = "-";
  std::map<std::uint64_t, double> arrival;
  std::size_t skipped = 0, total = 0;
  double horizon = 0.0, latency = 0.0;
  std::string line;
  std::size_t lineno = 0;
  std::size_t max_worker = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    try {
      const auto e = nlohmann::json::parse(line);
      const auto kind = e.at("event").get<std::string>();
      const double t = e.at("t_ms").get<double>();
      horizon = std::max(horizon, t);
      max_worker = std::max(max_worker, e.at("worker").get<std::size_t>());
      if (kind == "arrival") {
        ++s.arrived;
        arrival[e.at("request").get<std::uint64_t>()] = t;
      } else if (kind == "complete") {
        ++s.done;
        if (e.at("met_slo").get<bool>()) ++s.done_in_slo;
        latency += t - arrival.at(e.at("request").get<std::uint64_t>());
      } else if (kind == "discard") {
        ++s.discarded;
      } else if (kind == "step") {
        skipped += e.at("skipped_patch_blocks").get<std::size_t>();
        total += e.at("total_patch_blocks").get<std::size_t>();
      } else {
        detail::require(kind == "admit", "unknown event '" + kind + "'");
      }
    } catch (const std::exception& ex) {
      throw InvalidArgument("events line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  s.workers = s.arrived == 0 ? 0 : max_worker + 1;
  s.horizon_s = horizon / 1000.0;
  s.slo_pct = s.arrived == 0 ? 0.0 : 100.0 * static_cast<double>(s.done_in_slo) / static_cast<double>(s.arrived);
  s.goodput_rps = horizon <= 0.0 ? 0.0 : static_cast<double>(s.done_in_slo) / s.horizon_s;
  s.cache_savings = total == 0 ? 0.0 : static_cast<double>(skipped) / static_cast<double>(total);
  s.mean_latency_ms = s.done == 0 ? 0.0 : latency / static_cast<double>(s.done);
  return s;
}

/// Input rows followed by a total row whose counts are sums; its rates are
/// recomputed from the summed counts and horizons.
inline std::vector<SummaryRow> aggregate(std::span<const SummaryRow> rows) {
  std::vector<SummaryRow> out(rows.begin(), rows.end());
  SummaryRow t;
  t.policy = "total";
  t.plane = "all";
  double latency_weight = 0.0;
  for (const auto& s : rows) {
    t.workers += s.workers;
    t.horizon_s += s.horizon_s;
    t.arrived += s.arrived;
    t.done += s.done;
    t.done_in_slo += s.done_in_slo;
    t.discarded += s.discarded;
    t.qps += s.qps * s.horizon_s;
    latency_weight += s.mean_latency_ms * static_cast<double>(s.done);
  }
  t.qps = t.horizon_s > 0.0 ? t.qps / t.horizon_s : 0.0;
  t.slo_pct = t.arrived == 0 ? 0.0 : 100.0 * static_cast<double>(t.done_in_slo) / static_cast<double>(t.arrived);
  t.goodput_rps = t.horizon_s > 0.0 ? static_cast<double>(t.done_in_slo) / t.horizon_s : 0.0;
  t.mean_latency_ms = t.done == 0 ? 0.0 : latency_weight / static_cast<double>(t.done);
  out.push_back(t);
  return out;
}

// ---------------------------------------------------------------------------
// Simulate pipeline

/// "oracle" uses the cost model directly; anything else is a trained MLP file.
inline std::unique_ptr<StepLatencyPredictor> make_predictor(const RunConfig& cfg) {
  if (cfg.predictor == "oracle") return std::make_unique<CostModelOracle>(cfg.engine.cost);
  std::ifstream in(cfg.predictor);
  if (!in) throw InvalidArgument("cannot read predictor file '" + cfg.predictor + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument("predictor file '" + cfg.predictor + "': " + e.what());
  }
  return std::make_unique<MlpPredictor>(MlpPredictor::from_json(j));
}

struct RunArtifacts {
  std::string events;    // events.jsonl
  std::string summary;   // summary.csv
  std::string requests;  // requests.csv
};

inline RunArtifacts render(const MetricsReport& report, const EngineConfig& cfg, double qps) {
  RunArtifacts a;
  std::ostringstream ev, sum, req;
  write_events(ev, report.events);
  const SummaryRow row = summarize(report, cfg, qps);
  write_summary(sum, std::span(&row, 1));
  write_requests(req, report.requests);
  a.events = ev.str();
  a.summary = sum.str();
  a.requests = req.str();
  return a;
}

inline void write_artifacts(const std::filesystem::path& dir, const RunArtifacts& a) {
  std::filesystem::create_directories(dir);
  auto put = [&](const char* name, const std::string& body) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw InvalidArgument("cannot write '" + (dir / name).string() + "'");
    out << body;
  };
  put("events.jsonl", a.events);
  put("summary.csv", a.summary);
  put("requests.csv", a.requests);
}

/// Runs a trace under a config and renders every artifact.
inline RunArtifacts simulate(const RunConfig& cfg, std::span<const TraceRow> trace, MetricsReport* out = nullptr) {
  const auto predictor = make_predictor(cfg);
  MetricsReport report = run(trace, cfg.engine, *predictor);
  RunArtifacts a = render(report, cfg.engine, cfg.workload.qps);
  if (out) *out = std::move(report);
  return a;
}

}  // namespace mixres
