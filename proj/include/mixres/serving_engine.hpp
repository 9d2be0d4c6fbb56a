#pragma once

// Discrete-event serving loop. Each worker advances its whole active batch one
// denoising step at a time; admission happens only at step boundaries. The
// clock is simulated: a step costs simulate_step_latency of the batch
// composition (minus cache-skipped patch work in the numeric plane).
//
// Planes:
//   cost_only  requests are bookkeeping only.
//   numeric    every active request carries its latent patches and the toy
//              model actually runs, with optional patch-level caching.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mixres/cache_manager.hpp"
#include "mixres/error.hpp"
#include "mixres/latency_model.hpp"
#include "mixres/patch_format.hpp"
#include "mixres/scheduler.hpp"
#include "mixres/toy_model.hpp"

namespace mixres {

enum class Plane { numeric, cost_only };

inline std::string_view to_string(Plane p) { return p == Plane::numeric ? "numeric" : "cost_only"; }

inline Plane parse_plane(std::string_view s) {
  if (s == "numeric") return Plane::numeric;
  if (s == "cost_only") return Plane::cost_only;
  throw InvalidArgument("unknown plane '" + std::string(s) + "' (expected numeric or cost_only)");
}

/// One request of a workload trace.
struct TraceRow {
  std::uint64_t request_id = 0;
  double arrival_ms = 0.0;
  ResolutionClass resolution = ResolutionClass::low;
  double slo_ms = 0.0;

  friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

struct EngineConfig {
  Plane plane = Plane::cost_only;
  std::size_t workers = 1;
  std::size_t steps = 50;
  SchedulerConfig scheduler;
  CostModelParams cost;
  ModelConfig model;  // numeric plane only; its step count is overridden by `steps`
  bool cache_enabled = true;
  PredictorConfig cache;
  std::uint64_t seed = 0;     // initial latents in the numeric plane
  bool keep_latents = false;  // keep final latents in the report

  void validate() const {
    detail::require(workers >= 1, "engine: need at least one worker");
    detail::require(steps >= 1, "engine: steps must be >= 1");
    detail::require(scheduler.max_batch >= 1, "engine: max_batch must be >= 1");
    cost.validate();
    cache.validate();
  }
};

using Event = nlohmann::ordered_json;

struct RequestOutcome {
  std::uint64_t id = 0;
  ResolutionClass resolution = ResolutionClass::low;
  double arrival_ms = 0.0;
  double deadline_ms = 0.0;
  std::size_t worker = 0;
  std::optional<double> admit_ms;
  double finish_ms = 0.0;  // completion or discard time
  RequestState state = RequestState::waiting;
  bool met_slo = false;
};

struct MetricsReport {
  std::vector<RequestOutcome> requests;  // ordered by id
  std::vector<Event> events;
  std::size_t arrived = 0;
  std::size_t done = 0;
  std::size_t done_in_slo = 0;
  std::size_t discarded = 0;
  double horizon_ms = 0.0;
  double slo_satisfaction = 0.0;  // done_in_slo / arrived
  double goodput_rps = 0.0;       // done_in_slo per second of horizon
  std::size_t steps_executed = 0;
  std::size_t skipped_patch_blocks = 0;
  std::size_t total_patch_blocks = 0;
  CacheStats cache;
  std::map<std::uint64_t, Tensor> final_latents;

  double cache_savings() const {
    return total_patch_blocks == 0 ? 0.0
                                   : static_cast<double>(skipped_patch_blocks) / static_cast<double>(total_patch_blocks);
  }
};

struct ActiveRequest {
  RequestMeta meta;
  std::size_t total_steps = 0;
  std::size_t latent_side = 0;
  std::vector<Tensor> patches;  // numeric plane, ordinal order
};

struct WorkerState {
  std::size_t worker_id = 0;
  std::vector<RequestMeta> waiting;
  std::vector<ActiveRequest> active;
  double clock_ms = 0.0;
  std::optional<CacheManager> cache;
  bool busy = false;
  double busy_until_ms = 0.0;
};

/// Work computed for one step, committed by finish_step.
struct StepPlan {
  double start_ms = 0.0;
  double latency_ms = 0.0;
  Composition composition;
  StepTelemetry telemetry;
  std::vector<std::vector<Tensor>> next_patches;  // per active request (numeric plane)
};

/// Everything a worker step needs besides the worker itself.
struct StepEnv {
  const EngineConfig* cfg = nullptr;
  const ToyModel* model = nullptr;  // numeric plane
  std::size_t patch_size = 0;
};

inline double predicted_outstanding_ms(const WorkerState& w, const StepLatencyPredictor& predictor) {
  double total = 0.0;
  if (!w.active.empty()) {
    Composition c;
    std::size_t longest = 0;
    for (const auto& a : w.active) {
      c[a.meta.resolution] += 1;
      longest = std::max(longest, a.meta.remaining_steps);
    }
    total += predictor.step_latency_ms(c) * static_cast<double>(longest);
  }
  for (const auto& r : w.waiting) {
    total += predictor.step_latency_ms(Composition{}.with(r.resolution)) * static_cast<double>(r.remaining_steps);
  }
  return total;
}

/// Index of the least-loaded worker; ties go to the lowest index.
inline std::size_t dispatch(std::span<const double> outstanding_ms) {
  detail::require(!outstanding_ms.empty(), "dispatch: no workers");
  return static_cast<std::size_t>(std::min_element(outstanding_ms.begin(), outstanding_ms.end()) -
                                  outstanding_ms.begin());
}

inline std::size_t dispatch(const RequestMeta&, std::span<const WorkerState> workers,
                            const StepLatencyPredictor& predictor) {
  std::vector<double> load;
  load.reserve(workers.size());
  for (const auto& w : workers) load.push_back(predicted_outstanding_ms(w, predictor));
  return dispatch(load);
}

/// Runs the model for one step of the worker's batch without committing it.
/// On failure the worker's cache is restored and the exception propagates.
inline StepPlan begin_step(WorkerState& w, const StepEnv& env) {
  detail::require(!w.active.empty(), "worker_step: no active requests");
  const EngineConfig& cfg = *env.cfg;
  StepPlan plan;
  plan.start_ms = w.clock_ms;
  for (const auto& a : w.active) plan.composition[a.meta.resolution] += 1;

  if (cfg.plane == Plane::numeric) {
    detail::require(env.model != nullptr, "worker_step: numeric plane requires a model");
    std::vector<RequestShape> shapes;
    for (const auto& a : w.active) shapes.push_back({a.meta.id, a.latent_side, a.latent_side});
    std::vector<std::size_t> order;
    auto layout = CspLayout::build(shapes, env.patch_size, env.model->config().channels, &order);
    std::vector<Tensor> payloads(layout->num_patches());
    std::vector<RequestContext> contexts(layout->num_requests());
    for (std::size_t i = 0; i < w.active.size(); ++i) {
      const auto range = layout->patches_of_request(order[i]);
      detail::ensure(range.size() == w.active[i].patches.size(), "worker_step: patch count mismatch");
      for (std::size_t k = 0; k < range.size(); ++k) payloads[range.begin + k] = w.active[i].patches[k];
      contexts[order[i]] = {w.active[i].meta.id, w.active[i].total_steps - w.active[i].meta.remaining_steps};
    }
    const CspBatch batch(std::move(layout), std::move(payloads));
    std::optional<CacheManager> snapshot = w.cache;
    try {
      const CspBatch next = env.model->denoise_step(batch, contexts, w.cache ? &*w.cache : nullptr, &plan.telemetry);
      plan.next_patches.resize(w.active.size());
      for (std::size_t i = 0; i < w.active.size(); ++i) {
        const auto range = next.layout().patches_of_request(order[i]);
        plan.next_patches[i].assign(next.payloads().begin() + static_cast<std::ptrdiff_t>(range.begin),
                                    next.payloads().begin() + static_cast<std::ptrdiff_t>(range.end));
      }
    } catch (...) {
      w.cache = std::move(snapshot);
      throw;
    }
  }
  plan.latency_ms = simulate_step_latency(plan.composition, cfg.cost, plan.telemetry.skipped_patch_blocks);
  return plan;
}

/// Commits a step: advances the clock, decrements remaining steps, and retires
/// finished requests. Returns the step and completion events.
inline std::vector<Event> finish_step(WorkerState& w, StepPlan&& plan, const StepEnv& env,
                                      std::vector<RequestOutcome>* finished = nullptr,
                                      std::map<std::uint64_t, Tensor>* latents = nullptr) {
  const EngineConfig& cfg = *env.cfg;
  w.clock_ms = plan.start_ms + plan.latency_ms;
  std::vector<Event> events;
  events.push_back(Event{{"t_ms", w.clock_ms},
                         {"event", "step"},
                         {"worker", w.worker_id},
                         {"t_start_ms", plan.start_ms},
                         {"latency_ms", plan.latency_ms},
                         {"batch", plan.composition.total()},
                         {"low", plan.composition.counts[0]},
                         {"medium", plan.composition.counts[1]},
                         {"high", plan.composition.counts[2]},
                         {"skipped_patch_blocks", plan.telemetry.skipped_patch_blocks},
                         {"total_patch_blocks", plan.telemetry.total_patch_blocks}});
  std::vector<ActiveRequest> still;
  for (std::size_t i = 0; i < w.active.size(); ++i) {
    ActiveRequest a = std::move(w.active[i]);
    if (!plan.next_patches.empty()) a.patches = std::move(plan.next_patches[i]);
    a.meta.remaining_steps -= 1;
    if (a.meta.remaining_steps > 0) {
      still.push_back(std::move(a));
      continue;
    }
    a.meta.state = RequestState::done;
    const bool met = w.clock_ms <= a.meta.deadline_ms();
    events.push_back(Event{{"t_ms", w.clock_ms},
                           {"event", "complete"},
                           {"request", a.meta.id},
                           {"worker", w.worker_id},
                           {"met_slo", met}});
    if (finished) {
      RequestOutcome o;
      o.id = a.meta.id;
      o.state = RequestState::done;
      o.finish_ms = w.clock_ms;
      o.met_slo = met;
      finished->push_back(o);
    }
    if (latents && cfg.plane == Plane::numeric && cfg.keep_latents) {
      std::vector<RequestShape> shape{{a.meta.id, a.latent_side, a.latent_side}};
      const CspBatch single(CspLayout::build(shape, env.patch_size, env.model->config().channels), a.patches);
      (*latents)[a.meta.id] = reassemble_request(single, 0);
    }
  }
  w.active = std::move(still);
  return events;
}

/// One full step of a worker: begin_step followed by finish_step.
inline std::vector<Event> worker_step(WorkerState& w, const StepEnv& env,
                                      std::vector<RequestOutcome>* finished = nullptr,
                                      std::map<std::uint64_t, Tensor>* latents = nullptr) {
  return finish_step(w, begin_step(w, env), env, finished, latents);
}

/// Discrete-event simulation of a whole trace.
class Simulator {
 public:
  Simulator(EngineConfig cfg, const StepLatencyPredictor& predictor) : cfg_(std::move(cfg)), predictor_(predictor) {
    cfg_.validate();
    std::vector<Resolution> res;
    for (auto r : kResolutionClasses) res.push_back(Resolution::of(r, cfg_.cost.downsample));
    patch_size_ = choose_patch_size(res);
    if (cfg_.plane == Plane::numeric) {
      ModelConfig mc = cfg_.model;
      mc.steps = cfg_.steps;
      model_.emplace(mc);
    }
  }

  MetricsReport run(std::span<const TraceRow> trace) {
    validate_trace(trace);
    MetricsReport report;
    workers_.clear();
    for (std::size_t i = 0; i < cfg_.workers; ++i) {
      WorkerState w;
      w.worker_id = i;
      if (cfg_.plane == Plane::numeric && cfg_.cache_enabled) w.cache.emplace(model_->config().blocks_per_step, cfg_.cache);
      workers_.push_back(std::move(w));
    }
    outcomes_.clear();
    const StepEnv env{&cfg_, model_ ? &*model_ : nullptr, patch_size_};

    std::size_t next = 0;
    while (true) {
      WorkerState* stepping = nullptr;
      for (auto& w : workers_) {
        if (w.busy && (!stepping || w.busy_until_ms < stepping->busy_until_ms)) stepping = &w;
      }
      const double t_arrival = next < trace.size() ? trace[next].arrival_ms : std::numeric_limits<double>::infinity();
      if (!stepping && next >= trace.size()) break;

      if (stepping && stepping->busy_until_ms <= t_arrival) {
        WorkerState& w = *stepping;
        std::vector<RequestOutcome> finished;
        auto events = finish_step(w, std::move(*pending_[w.worker_id]), env, &finished, &report.final_latents);
        pending_.erase(w.worker_id);
        w.busy = false;
        for (auto& e : events) report.events.push_back(std::move(e));
        for (const auto& f : finished) {
          auto& o = outcomes_.at(f.id);
          o.state = RequestState::done;
          o.finish_ms = f.finish_ms;
          o.met_slo = f.met_slo;
        }
        ++report.steps_executed;
        advance_worker(w, w.clock_ms, env, report);
        continue;
      }

      const TraceRow& row = trace[next++];
      RequestMeta meta;
      meta.id = row.request_id;
      meta.resolution = row.resolution;
      meta.arrival_ms = row.arrival_ms;
      meta.ddl_ms = row.slo_ms;
      meta.sa_ms = standalone_latency(row.resolution, cfg_.cost, cfg_.steps);
      meta.remaining_steps = cfg_.steps;
      const std::size_t wid = dispatch(meta, workers_, predictor_);
      RequestOutcome o;
      o.id = meta.id;
      o.resolution = meta.resolution;
      o.arrival_ms = meta.arrival_ms;
      o.deadline_ms = meta.deadline_ms();
      o.worker = wid;
      outcomes_[meta.id] = o;
      report.events.push_back(Event{{"t_ms", row.arrival_ms},
                                    {"event", "arrival"},
                                    {"request", row.request_id},
                                    {"worker", wid},
                                    {"resolution", to_string(row.resolution)},
                                    {"slo_ms", row.slo_ms}});
      WorkerState& w = workers_[wid];
      w.waiting.push_back(meta);
      if (!w.busy) advance_worker(w, row.arrival_ms, env, report);
    }

    for (auto& [id, o] : outcomes_) {
      detail::ensure(o.state == RequestState::done || o.state == RequestState::discarded,
                     "simulator: request " + std::to_string(id) + " did not terminate");
      report.requests.push_back(o);
    }
    summarize(report);
    for (const auto& w : workers_) {
      if (w.cache) report.cache += w.cache->stats();
    }
    return report;
  }

  std::size_t patch_size() const noexcept { return patch_size_; }
  const std::vector<WorkerState>& workers() const noexcept { return workers_; }

 private:
  static void validate_trace(std::span<const TraceRow> trace) {
    std::vector<std::uint64_t> ids;
    for (std::size_t i = 0; i < trace.size(); ++i) {
      detail::require(std::isfinite(trace[i].arrival_ms) && trace[i].arrival_ms >= 0.0,
                      "trace: row " + std::to_string(i) + " has an invalid arrival time");
      detail::require(trace[i].slo_ms > 0.0, "trace: row " + std::to_string(i) + " has a non-positive SLO");
      detail::require(i == 0 || trace[i].arrival_ms >= trace[i - 1].arrival_ms,
                      "trace: arrivals must be non-decreasing (row " + std::to_string(i) + ")");
      ids.push_back(trace[i].request_id);
    }
    std::sort(ids.begin(), ids.end());
    detail::require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(), "trace: duplicate request id");
  }

  // Scheduler tick at a step boundary (or on arrival to an idle worker), then
  // start the next step if anything is active.
  void advance_worker(WorkerState& w, double now, const StepEnv& env, MetricsReport& report) {
    w.clock_ms = now;
    if (!w.waiting.empty()) {
      std::vector<RequestMeta> active;
      for (const auto& a : w.active) active.push_back(a.meta);
      const TickResult tick = schedule_tick(w.waiting, active, predictor_, now, cfg_.scheduler, cfg_.cost);
      for (auto id : tick.discarded) {
        take_waiting(w, id);
        auto& o = outcomes_.at(id);
        o.state = RequestState::discarded;
        o.finish_ms = now;
        report.events.push_back(Event{{"t_ms", now}, {"event", "discard"}, {"request", id}, {"worker", w.worker_id}});
      }
      for (auto id : tick.admitted) {
        RequestMeta meta = take_waiting(w, id);
        meta.state = RequestState::active;
        ActiveRequest a;
        a.meta = meta;
        a.total_steps = cfg_.steps;
        a.latent_side = Resolution::of(meta.resolution, cfg_.cost.downsample).latent_height();
        if (cfg_.plane == Plane::numeric) {
          const RequestLatent init{id, ToyModel::initial_latent(cfg_.seed, id, model_->config().channels, a.latent_side,
                                                                a.latent_side)};
          a.patches = split(std::span(&init, 1), patch_size_).payloads();
        }
        w.active.push_back(std::move(a));
        outcomes_.at(id).admit_ms = now;
        report.events.push_back(Event{{"t_ms", now}, {"event", "admit"}, {"request", id}, {"worker", w.worker_id}});
      }
    }
    if (!w.active.empty()) {
      StepPlan plan = begin_step(w, env);
      w.busy = true;
      w.busy_until_ms = plan.start_ms + plan.latency_ms;
      report.skipped_patch_blocks += plan.telemetry.skipped_patch_blocks;
      report.total_patch_blocks += plan.telemetry.total_patch_blocks;
      pending_[w.worker_id] = std::move(plan);
    }
  }

  static RequestMeta take_waiting(WorkerState& w, std::uint64_t id) {
    const auto it = std::find_if(w.waiting.begin(), w.waiting.end(), [&](const RequestMeta& r) { return r.id == id; });
    detail::ensure(it != w.waiting.end(), "scheduler: request " + std::to_string(id) + " is not waiting");
    RequestMeta r = *it;
    w.waiting.erase(it);
    return r;
  }

  void summarize(MetricsReport& r) const {
    r.arrived = r.requests.size();
    for (const auto& o : r.requests) {
      if (o.state == RequestState::done) ++r.done;
      if (o.state == RequestState::discarded) ++r.discarded;
      if (o.met_slo) ++r.done_in_slo;
    }
    for (const auto& e : r.events) r.horizon_ms = std::max(r.horizon_ms, e.at("t_ms").get<double>());
    r.slo_satisfaction = r.arrived == 0 ? 0.0 : static_cast<double>(r.done_in_slo) / static_cast<double>(r.arrived);
    r.goodput_rps = r.horizon_ms <= 0.0 ? 0.0 : static_cast<double>(r.done_in_slo) / (r.horizon_ms / 1000.0);
  }

  EngineConfig cfg_;
  const StepLatencyPredictor& predictor_;
  std::size_t patch_size_ = 0;
  std::optional<ToyModel> model_;
  std::vector<WorkerState> workers_;
  std::map<std::size_t, std::optional<StepPlan>> pending_;
  std::map<std::uint64_t, RequestOutcome> outcomes_;
};

/// Convenience wrapper around Simulator.
inline MetricsReport run(std::span<const TraceRow> trace, const EngineConfig& cfg, const StepLatencyPredictor& predictor) {
  Simulator sim(cfg, predictor);
  return sim.run(trace);
}

}  // namespace mixres
