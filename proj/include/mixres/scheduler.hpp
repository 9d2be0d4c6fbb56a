#pragma once

// Admission control at denoising-step boundaries.
//
// slo_aware repeatedly picks the waiting request with the least slack
//     slack = (DDL - elapsed - predicted_remaining) / standalone_latency
// drops it if it cannot finish even when started now, swaps it for the
// candidate with the best throughput gain when its slack is relaxed
// (> theta_mode), and admits it unless that would make an active request miss
// a deadline it would otherwise meet. fcfs admits in arrival order up to the
// batch limit; sequential runs one request at a time.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mixres/error.hpp"
#include "mixres/latency_model.hpp"
#include "mixres/patch_format.hpp"

namespace mixres {

enum class RequestState { waiting, active, done, discarded };

inline std::string_view to_string(RequestState s) {
  switch (s) {
    case RequestState::waiting: return "waiting";
    case RequestState::active: return "active";
    case RequestState::done: return "done";
    case RequestState::discarded: return "discarded";
  }
  return "unknown";
}

struct RequestMeta {
  std::uint64_t id = 0;
  ResolutionClass resolution = ResolutionClass::low;
  double arrival_ms = 0.0;
  double ddl_ms = 0.0;  // SLO window relative to arrival
  double sa_ms = 0.0;   // standalone latency
  std::size_t remaining_steps = 0;
  RequestState state = RequestState::waiting;

  double deadline_ms() const { return arrival_ms + ddl_ms; }
};

/// Lower is more urgent.
inline double slack(const RequestMeta& r, double now_ms, double predicted_remaining_ms) {
  detail::require(r.sa_ms > 0.0, "slack: standalone latency must be positive (request " + std::to_string(r.id) + ")");
  return (r.ddl_ms - (now_ms - r.arrival_ms) - predicted_remaining_ms) / r.sa_ms;
}

/// True iff finishing `predicted_latency_ms` from now lands strictly after the deadline.
inline bool time_out(const RequestMeta& r, double predicted_latency_ms, double now_ms) {
  return now_ms + predicted_latency_ms > r.deadline_ms();
}

enum class Policy { slo_aware, fcfs, sequential };

inline std::string_view to_string(Policy p) {
  switch (p) {
    case Policy::slo_aware: return "slo_aware";
    case Policy::fcfs: return "fcfs";
    case Policy::sequential: return "sequential";
  }
  return "unknown";
}

inline Policy parse_policy(std::string_view s) {
  if (s == "slo_aware") return Policy::slo_aware;
  if (s == "fcfs") return Policy::fcfs;
  if (s == "sequential") return Policy::sequential;
  throw InvalidArgument("unknown policy '" + std::string(s) + "' (expected slo_aware, fcfs or sequential)");
}

struct SchedulerConfig {
  Policy policy = Policy::slo_aware;
  double theta_mode = 2.0;
  std::size_t max_batch = 12;
};

struct TickResult {
  std::vector<std::uint64_t> admitted;
  std::vector<std::uint64_t> discarded;
};

/// Predictor failure during a tick; no decision of that tick is applied.
class SchedulerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline Composition composition_of(std::span<const RequestMeta* const> reqs) {
  Composition c;
  for (const auto* r : reqs) c[r->resolution] += 1;
  return c;
}

inline double checked_step_latency(const StepLatencyPredictor& p, const Composition& c) {
  if (c.empty()) return 0.0;
  double v = 0.0;
  try {
    v = p.step_latency_ms(c);
  } catch (const std::exception& e) {
    throw SchedulerError(std::string("predictor failed: ") + e.what());
  }
  if (!std::isfinite(v) || v < 0.0) throw SchedulerError("predictor returned " + std::to_string(v) + " for " + to_string(c));
  return v;
}

inline double latent_pixels(const Composition& c, const CostModelParams& geometry) {
  double px = 0.0;
  for (auto r : kResolutionClasses) px += static_cast<double>(c[r] * geometry.tokens(r));
  return px;
}

}  // namespace detail

/// Throughput (latent pixels per predicted ms) of a batch; 0 when empty.
inline double batch_throughput(const Composition& c, const StepLatencyPredictor& p, const CostModelParams& geometry) {
  if (c.empty()) return 0.0;
  return detail::latent_pixels(c, geometry) / detail::checked_step_latency(p, c);
}

/// One admission round. Queues are read-only; the caller applies the result.
inline TickResult schedule_tick(std::span<const RequestMeta> waiting, std::span<const RequestMeta> active,
                                const StepLatencyPredictor& predictor, double now_ms, const SchedulerConfig& cfg,
                                const CostModelParams& geometry = {}) {
  TickResult result;
  std::vector<const RequestMeta*> wait;
  std::vector<const RequestMeta*> act;
  for (const auto& r : waiting) wait.push_back(&r);
  for (const auto& r : active) act.push_back(&r);
  // Arrival order (id as tie-break) is the canonical queue order.
  std::stable_sort(wait.begin(), wait.end(), [](const RequestMeta* a, const RequestMeta* b) {
    return a->arrival_ms != b->arrival_ms ? a->arrival_ms < b->arrival_ms : a->id < b->id;
  });

  if (cfg.policy != Policy::slo_aware) {
    const std::size_t cap = cfg.policy == Policy::sequential ? 1 : cfg.max_batch;
    for (const auto* r : wait) {
      if (act.size() >= cap) break;
      act.push_back(r);
      result.admitted.push_back(r->id);
    }
    return result;
  }

  auto step_latency = [&](const std::vector<const RequestMeta*>& set) {
    return detail::checked_step_latency(predictor, detail::composition_of(set));
  };
  auto with = [](std::vector<const RequestMeta*> set, const RequestMeta* r) {
    set.push_back(r);
    return set;
  };
  auto erase = [](std::vector<const RequestMeta*>& v, const RequestMeta* r) { v.erase(std::find(v.begin(), v.end(), r)); };

  while (!wait.empty() && act.size() < cfg.max_batch) {
    // Least-slack waiting request, each scored as if admitted next.
    const RequestMeta* cur = nullptr;
    double cur_slack = 0.0;
    double cur_step = 0.0;
    for (const auto* w : wait) {
      const double lat = step_latency(with(act, w));
      const double s = slack(*w, now_ms, lat * static_cast<double>(w->remaining_steps));
      if (!cur || s < cur_slack) {
        cur = w;
        cur_slack = s;
        cur_step = lat;
      }
    }

    if (time_out(*cur, cur_step * static_cast<double>(cur->remaining_steps), now_ms)) {
      result.discarded.push_back(cur->id);
      erase(wait, cur);
      continue;
    }

    if (cur_slack > cfg.theta_mode) {
      // Throughput mode: best gain among candidates that can still finish.
      const double base = batch_throughput(detail::composition_of(act), predictor, geometry);
      const RequestMeta* best = cur;
      double best_gain = batch_throughput(detail::composition_of(with(act, cur)), predictor, geometry) - base;
      for (const auto* w : wait) {
        if (w == cur) continue;
        const auto set = with(act, w);
        const double lat = step_latency(set);
        if (time_out(*w, lat * static_cast<double>(w->remaining_steps), now_ms)) continue;
        const double gain = batch_throughput(detail::composition_of(set), predictor, geometry) - base;
        if (gain > best_gain) {
          best = w;
          best_gain = gain;
        }
      }
      cur = best;
      cur_step = step_latency(with(act, cur));
    }

    // Schedulability: admitting cur must not push any active request past a
    // deadline it would otherwise meet. The least-slack request goes first.
    const double before = step_latency(act);
    std::vector<const RequestMeta*> order = act;
    std::stable_sort(order.begin(), order.end(), [&](const RequestMeta* a, const RequestMeta* b) {
      return slack(*a, now_ms, before * static_cast<double>(a->remaining_steps)) <
             slack(*b, now_ms, before * static_cast<double>(b->remaining_steps));
    });
    bool blocked = false;
    for (const auto* a : order) {
      const auto rem = static_cast<double>(a->remaining_steps);
      if (time_out(*a, cur_step * rem, now_ms) && !time_out(*a, before * rem, now_ms)) {
        blocked = true;
        break;
      }
    }
    if (blocked) break;
    act.push_back(cur);
    erase(wait, cur);
    result.admitted.push_back(cur->id);
  }
  return result;
}

}  // namespace mixres
