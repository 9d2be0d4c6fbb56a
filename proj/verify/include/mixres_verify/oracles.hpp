#pragma once

// Slow, direct reference implementations used to check the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "mixres/mixres.hpp"

namespace mixres::oracle {

/// Zero-padded 2-D convolution by direct summation with bounds checks.
inline Tensor conv2d(const Tensor& x, const ConvParams& p) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = p.weight.dim(0);
  const long k = static_cast<long>(p.kernel_size);
  const long pad = k / 2;
  Tensor out({n, cout, h, w});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          double acc = p.bias.empty() ? 0.0 : p.bias[co];
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (long ky = 0; ky < k; ++ky)
              for (long kx = 0; kx < k; ++kx) {
                const long sy = static_cast<long>(y) + ky - pad;
                const long sx = static_cast<long>(xx) + kx - pad;
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                acc += p.weight.at(co, ci, static_cast<std::size_t>(ky), static_cast<std::size_t>(kx)) *
                       x.at(b, ci, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
              }
          out.data()[((b * cout + co) * h + y) * w + xx] = acc;
        }
  return out;
}

/// Group norm with textbook mean and (population) variance.
inline Tensor group_norm(const Tensor& x, const GroupNormParams& p) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t per = c / p.groups;
  Tensor out(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t g = 0; g < p.groups; ++g) {
      double sum = 0.0;
      std::size_t count = 0;
      for (std::size_t ch = g * per; ch < (g + 1) * per; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx) {
            sum += x.at(b, ch, y, xx);
            ++count;
          }
      const double mean = sum / static_cast<double>(count);
      double var = 0.0;
      for (std::size_t ch = g * per; ch < (g + 1) * per; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx) var += (x.at(b, ch, y, xx) - mean) * (x.at(b, ch, y, xx) - mean);
      var /= static_cast<double>(count);
      for (std::size_t ch = g * per; ch < (g + 1) * per; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx) {
            const double gamma = p.gamma.empty() ? 1.0 : p.gamma[ch];
            const double beta = p.beta.empty() ? 0.0 : p.beta[ch];
            out.data()[((b * c + ch) * h + y) * w + xx] = (x.at(b, ch, y, xx) - mean) / std::sqrt(var + p.eps) * gamma + beta;
          }
    }
  return out;
}

/// softmax(q k^T / sqrt(d)) v over (N, T, D) tensors.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const std::size_t n = q.dim(0), t = q.dim(1), d = q.dim(2), dv = v.dim(2);
  Tensor out({n, t, dv});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<double> s(t);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < t; ++j) {
        double dot = 0.0;
        for (std::size_t e = 0; e < d; ++e) dot += q.data()[(b * t + i) * d + e] * k.data()[(b * t + j) * d + e];
        s[j] = dot / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t e = 0; e < dv; ++e) {
        double acc = 0.0;
        for (std::size_t j = 0; j < t; ++j) acc += s[j] / z * v.data()[(b * t + j) * dv + e];
        out.data()[(b * t + i) * dv + e] = acc;
      }
    }
  return out;
}

/// Membership scan for the three-way set split.
inline SetPartition partition(std::span<const PatchId> input, std::span<const PatchId> cached) {
  auto contains = [](std::span<const PatchId> s, const PatchId& id) {
    for (const auto& x : s)
      if (x == id) return true;
    return false;
  };
  SetPartition out;
  for (const auto& id : input) (contains(cached, id) ? out.common : out.fresh).push_back(id);
  for (const auto& id : cached)
    if (!contains(input, id)) out.expired.push_back(id);
  std::sort(out.common.begin(), out.common.end());
  std::sort(out.fresh.begin(), out.fresh.end());
  std::sort(out.expired.begin(), out.expired.end());
  return out;
}

/// Per-patch cache, one entry at a time in a flat list.
class SequentialCache {
 public:
  struct Entry {
    PatchId id;
    CacheEntry value;
  };

  Entry* find(const PatchId& id) {
    for (auto& e : entries_)
      if (e.id == id) return &e;
    return nullptr;
  }

  Mask predict(const CspBatch& in, const PredictorConfig& cfg) {
    Mask m(in.size(), false);
    for (std::size_t p = 0; p < in.size(); ++p) {
      Entry* e = find(in.id(p));
      if (!e) continue;
      double acc = 0.0;
      const auto a = in.payload(p).data();
      const auto b = e->value.input_snapshot.data();
      for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
      m[p] = acc / static_cast<double>(a.size()) < cfg.threshold && e->value.reuse_streak < cfg.max_reuse_streak;
    }
    return m;
  }

  std::vector<Tensor> fill(const CspBatch& out, const Mask& mask) {
    std::vector<Tensor> res = out.payloads();
    for (std::size_t p = 0; p < out.size(); ++p) {
      if (!mask[p]) continue;
      Entry* e = find(out.id(p));
      res[p] = e->value.output_snapshot;
      e->value.reuse_streak += 1;
    }
    return res;
  }

  void update(const CspBatch& in, const CspBatch& out, const Mask& mask) {
    for (std::size_t p = 0; p < in.size(); ++p) {
      if (mask[p]) continue;
      Entry* e = find(in.id(p));
      if (e) {
        e->value = {in.payload(p), out.payload(p), 0};
      } else {
        entries_.push_back({in.id(p), {in.payload(p), out.payload(p), 0}});
      }
    }
  }

  std::size_t evict(std::span<const PatchId> ids) {
    std::size_t n = 0;
    for (const auto& id : ids) {
      for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].id == id) {
          entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(i));
          ++n;
          break;
        }
      }
    }
    return n;
  }

  std::vector<PatchId> ids() const {
    std::vector<PatchId> out;
    for (const auto& e : entries_) out.push_back(e.id);
    return out;
  }

  bool same_state(const BlockCache& c) const {
    if (c.size() != entries_.size()) return false;
    for (const auto& e : entries_) {
      const CacheEntry* other = c.find(e.id);
      if (!other || other->reuse_streak != e.value.reuse_streak || other->input_snapshot != e.value.input_snapshot ||
          other->output_snapshot != e.value.output_snapshot)
        return false;
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
};

/// Masked block forward done patch by patch: substitute, run, fill.
template <typename Block>
std::vector<Tensor> masked_forward(const CspBatch& in, const Mask& mask, Block&& block, SequentialCache& cache) {
  std::vector<Tensor> sub = in.payloads();
  for (std::size_t p = 0; p < in.size(); ++p)
    if (mask[p]) sub[p] = cache.find(in.id(p))->value.input_snapshot;
  const CspBatch out = block(in.with_payloads(std::move(sub)));
  return cache.fill(out, mask);
}

/// Number of non-empty multisets of size <= m over n classes, by enumeration.
inline std::uint64_t enumerate_multisets(std::size_t m, std::size_t n) {
  std::uint64_t count = 0;
  std::vector<std::size_t> counts(n, 0);
  // Odometer over count vectors with total <= m.
  while (true) {
    std::size_t total = 0;
    for (auto c : counts) total += c;
    if (total >= 1 && total <= m) ++count;
    std::size_t i = 0;
    while (i < n) {
      if (++counts[i] <= m) break;
      counts[i] = 0;
      ++i;
    }
    if (i == n) break;
  }
  return count;
}

/// argmin by linear scan, lowest index on ties.
inline std::size_t argmin(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] < v[best]) best = i;
  return best;
}

/// Step-by-step interpreter of the slack-based admission loop, recomputing
/// every quantity from scratch each iteration.
inline TickResult admission_interpreter(std::vector<RequestMeta> waiting, std::vector<RequestMeta> active,
                                        const StepLatencyPredictor& pred, double now, const SchedulerConfig& cfg,
                                        const CostModelParams& geometry = {}) {
  TickResult res;
  auto comp = [](const std::vector<RequestMeta>& set) {
    Composition c;
    for (const auto& r : set) c[r.resolution] += 1;
    return c;
  };
  auto latency = [&](const std::vector<RequestMeta>& set) { return set.empty() ? 0.0 : pred.step_latency_ms(comp(set)); };
  auto plus = [](std::vector<RequestMeta> set, const RequestMeta& r) {
    set.push_back(r);
    return set;
  };
  auto pixels = [&](const std::vector<RequestMeta>& set) {
    double px = 0.0;
    for (const auto& r : set) px += static_cast<double>(geometry.tokens(r.resolution));
    return px;
  };
  auto throughput = [&](const std::vector<RequestMeta>& set) { return set.empty() ? 0.0 : pixels(set) / latency(set); };
  auto late = [&](const RequestMeta& r, double lat) { return now + lat > r.arrival_ms + r.ddl_ms; };
  auto slack_of = [&](const RequestMeta& r, double remaining) {
    return (r.ddl_ms - (now - r.arrival_ms) - remaining) / r.sa_ms;
  };
  std::stable_sort(waiting.begin(), waiting.end(), [](const RequestMeta& a, const RequestMeta& b) {
    return a.arrival_ms != b.arrival_ms ? a.arrival_ms < b.arrival_ms : a.id < b.id;
  });

  while (!waiting.empty() && active.size() < cfg.max_batch) {
    // 1. least-slack waiting task
    std::size_t cur = 0;
    for (std::size_t i = 0; i < waiting.size(); ++i) {
      const double si = slack_of(waiting[i], latency(plus(active, waiting[i])) * waiting[i].remaining_steps);
      const double sc = slack_of(waiting[cur], latency(plus(active, waiting[cur])) * waiting[cur].remaining_steps);
      if (si < sc) cur = i;
    }
    // 2-3. discard if it cannot finish even now
    const double pred_cur = latency(plus(active, waiting[cur])) * waiting[cur].remaining_steps;
    if (late(waiting[cur], pred_cur)) {
      res.discarded.push_back(waiting[cur].id);
      waiting.erase(waiting.begin() + static_cast<std::ptrdiff_t>(cur));
      continue;
    }
    // 4. throughput mode
    if (slack_of(waiting[cur], pred_cur) > cfg.theta_mode) {
      const double base = throughput(active);
      std::size_t best = cur;
      for (std::size_t i = 0; i < waiting.size(); ++i) {
        if (i == cur) continue;
        if (late(waiting[i], latency(plus(active, waiting[i])) * waiting[i].remaining_steps)) continue;
        if (throughput(plus(active, waiting[i])) - base > throughput(plus(active, waiting[best])) - base) best = i;
      }
      cur = best;
    }
    // 5. schedulability over every active task
    const double before = latency(active);
    const double after = latency(plus(active, waiting[cur]));
    bool blocked = false;
    for (const auto& a : active) {
      if (late(a, after * a.remaining_steps) && !late(a, before * a.remaining_steps)) blocked = true;
    }
    if (blocked) break;
    res.admitted.push_back(waiting[cur].id);
    active.push_back(waiting[cur]);
    waiting.erase(waiting.begin() + static_cast<std::ptrdiff_t>(cur));
  }
  return res;
}

}  // namespace mixres::oracle
