#pragma once

// Patch-level block cache. Each block owns an ordered map patch id -> entry.
// A step touches the cache in coalesced passes over the whole batch:
//   partition_sets  -> common / new / expired ids
//   evict_expired   -> drop ids whose request has left the batch
//   predict_reuse   -> per-patch reuse mask
//   batched_fill    -> masked outputs replaced by cached outputs
//   batched_update  -> unmasked snapshots refreshed, new ids inserted

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mixres/error.hpp"
#include "mixres/patch_format.hpp"
#include "mixres/tensor.hpp"

namespace mixres {

/// One flag per patch in CSP order; true = reuse the cached output.
using Mask = std::vector<bool>;

struct CacheEntry {
  Tensor input_snapshot;
  Tensor output_snapshot;
  std::size_t reuse_streak = 0;

  friend bool operator==(const CacheEntry&, const CacheEntry&) = default;
};

struct PredictorConfig {
  double threshold = 0.1;
  std::size_t max_reuse_streak = 3;

  void validate() const {
    detail::require(threshold > 0.0, "cache: MSE threshold must be positive");
    detail::require(max_reuse_streak >= 1, "cache: max_reuse_streak must be >= 1");
  }
};

inline double mean_squared_error(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape() && !a.empty(), "mse: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

/// Decides whether a patch's block input is close enough to its cached input.
class ReusePredictor {
 public:
  virtual ~ReusePredictor() = default;
  virtual bool similar(const Tensor& input, const Tensor& cached_input) const = 0;
};

/// Reuse when the raw block-input MSE is below the threshold.
class MseThresholdPredictor final : public ReusePredictor {
 public:
  explicit MseThresholdPredictor(double threshold) : threshold_(threshold) {
    detail::require(threshold > 0.0, "cache: MSE threshold must be positive");
  }

  bool similar(const Tensor& input, const Tensor& cached_input) const override {
    return mean_squared_error(input, cached_input) < threshold_;
  }

  double threshold() const noexcept { return threshold_; }

 private:
  double threshold_;
};

struct SetPartition {
  std::vector<PatchId> common;
  std::vector<PatchId> fresh;  // the "new" set
  std::vector<PatchId> expired;
};

namespace detail {

inline std::vector<PatchId> sorted_unique(std::span<const PatchId> ids, const char* what) {
  std::vector<PatchId> out(ids.begin(), ids.end());
  std::sort(out.begin(), out.end());
  require(std::adjacent_find(out.begin(), out.end()) == out.end(),
          std::string("partition_sets: duplicate id in ") + what);
  return out;
}

}  // namespace detail

/// Three-way split of batch ids against cached ids. Outputs are sorted.
inline SetPartition partition_sets(std::span<const PatchId> input_ids, std::span<const PatchId> cached_ids) {
  const auto in = detail::sorted_unique(input_ids, "input set");
  const auto cached = detail::sorted_unique(cached_ids, "cached set");
  SetPartition out;
  std::set_intersection(in.begin(), in.end(), cached.begin(), cached.end(), std::back_inserter(out.common));
  std::set_difference(in.begin(), in.end(), cached.begin(), cached.end(), std::back_inserter(out.fresh));
  std::set_difference(cached.begin(), cached.end(), in.begin(), in.end(), std::back_inserter(out.expired));
  return out;
}

struct CacheStats {
  std::uint64_t queries = 0;
  std::uint64_t hits = 0;            // patches whose mask bit was set
  std::uint64_t computed_patches = 0;
  std::uint64_t full_skips = 0;      // block invocations skipped entirely
  std::uint64_t inserts = 0;
  std::uint64_t evictions = 0;

  CacheStats& operator+=(const CacheStats& o) {
    queries += o.queries;
    hits += o.hits;
    computed_patches += o.computed_patches;
    full_skips += o.full_skips;
    inserts += o.inserts;
    evictions += o.evictions;
    return *this;
  }
  friend bool operator==(const CacheStats&, const CacheStats&) = default;
};

class BlockCache {
 public:
  using Store = std::map<PatchId, CacheEntry>;

  explicit BlockCache(std::size_t block_id = 0) : block_id_(block_id) {}

  std::size_t block_id() const noexcept { return block_id_; }
  std::size_t size() const noexcept { return store_.size(); }
  const Store& store() const noexcept { return store_; }
  const CacheStats& stats() const noexcept { return stats_; }
  CacheStats& stats() noexcept { return stats_; }

  const CacheEntry* find(const PatchId& id) const {
    const auto it = store_.find(id);
    return it == store_.end() ? nullptr : &it->second;
  }

  std::vector<PatchId> ids() const {
    std::vector<PatchId> out;
    out.reserve(store_.size());
    for (const auto& [id, entry] : store_) out.push_back(id);
    return out;
  }

  SetPartition partition(const CspBatch& batch) const {
    std::vector<PatchId> in;
    in.reserve(batch.size());
    for (const auto& rec : batch.layout().patches()) in.push_back(rec.id);
    return partition_sets(in, ids());
  }

  /// mask[p] = entry exists && predictor says similar && reuse_streak < max.
  Mask predict_reuse(const CspBatch& inputs, const ReusePredictor& predictor, const PredictorConfig& cfg) {
    Mask mask(inputs.size(), false);
    for (std::size_t p = 0; p < inputs.size(); ++p) {
      const CacheEntry* e = find(inputs.id(p));
      if (!e || e->reuse_streak >= cfg.max_reuse_streak) continue;
      mask[p] = predictor.similar(inputs.payload(p), e->input_snapshot);
    }
    stats_.queries += inputs.size();
    return mask;
  }

  /// Replaces masked outputs with cached outputs and bumps their streaks.
  /// All masked ids are checked before anything is modified.
  CspBatch batched_fill(const CspBatch& outputs, const Mask& mask) {
    check_mask(outputs, mask);
    std::vector<std::pair<std::size_t, CacheEntry*>> hits;
    for (std::size_t p = 0; p < outputs.size(); ++p) {
      if (!mask[p]) continue;
      const auto it = store_.find(outputs.id(p));
      detail::ensure(it != store_.end(), "batched_fill: block " + std::to_string(block_id_) +
                                             " has no entry for masked patch " + to_string(outputs.id(p)));
      hits.emplace_back(p, &it->second);
    }
    if (hits.empty()) return outputs;
    std::vector<Tensor> payloads = outputs.payloads();
    for (auto& [p, entry] : hits) {
      payloads[p] = entry->output_snapshot;
      ++entry->reuse_streak;
    }
    stats_.hits += hits.size();
    return outputs.with_payloads(std::move(payloads));
  }

  /// Refreshes snapshots of unmasked patches (streak reset to 0); ids in the
  /// new set are inserted. Masked entries are left untouched.
  void batched_update(const CspBatch& inputs, const CspBatch& outputs, const Mask& mask, const SetPartition& sets) {
    check_mask(inputs, mask);
    detail::require(inputs.size() == outputs.size(), "batched_update: inputs/outputs size mismatch");
    std::vector<std::pair<PatchId, std::size_t>> todo;
    for (std::size_t p = 0; p < inputs.size(); ++p) {
      if (!mask[p]) todo.emplace_back(inputs.id(p), p);
    }
    std::sort(todo.begin(), todo.end());
    // Both sequences are ordered by id, so a single forward walk with hinted
    // insertion covers updates and New-set inserts together.
    auto hint = store_.begin();
    auto fresh = sets.fresh.begin();
    for (const auto& [id, p] : todo) {
      hint = store_.lower_bound(id);
      while (fresh != sets.fresh.end() && *fresh < id) ++fresh;
      CacheEntry entry{inputs.payload(p), outputs.payload(p), 0};
      if (hint != store_.end() && hint->first == id) {
        hint->second = std::move(entry);
      } else {
        detail::ensure(fresh != sets.fresh.end() && *fresh == id,
                       "batched_update: patch " + to_string(id) + " is uncached but missing from the new set");
        hint = store_.emplace_hint(hint, id, std::move(entry));
        ++stats_.inserts;
      }
    }
    stats_.computed_patches += todo.size();
  }

  /// Removes the given ids; returns how many were present.
  std::size_t evict_expired(std::span<const PatchId> expired) {
    std::size_t removed = 0;
    for (const auto& id : expired) removed += store_.erase(id);
    stats_.evictions += removed;
    return removed;
  }

  void clear() { store_.clear(); }

 private:
  static void check_mask(const CspBatch& b, const Mask& mask) {
    detail::require(mask.size() == b.size(), "cache: mask length " + std::to_string(mask.size()) +
                                                 " does not match " + std::to_string(b.size()) + " patches");
  }

  std::size_t block_id_;
  Store store_;
  CacheStats stats_;
};

/// One BlockCache per block of the model, plus the reuse policy.
class CacheManager {
 public:
  CacheManager(std::size_t blocks, PredictorConfig cfg, std::shared_ptr<const ReusePredictor> predictor = nullptr)
      : cfg_(cfg), predictor_(std::move(predictor)) {
    cfg_.validate();
    if (!predictor_) predictor_ = std::make_shared<MseThresholdPredictor>(cfg_.threshold);
    caches_.reserve(blocks);
    for (std::size_t b = 0; b < blocks; ++b) caches_.emplace_back(b);
  }

  std::size_t num_blocks() const noexcept { return caches_.size(); }
  BlockCache& block(std::size_t b) { return caches_.at(b); }
  const BlockCache& block(std::size_t b) const { return caches_.at(b); }
  const PredictorConfig& config() const noexcept { return cfg_; }
  const ReusePredictor& predictor() const noexcept { return *predictor_; }

  Mask predict_reuse(std::size_t block_id, const CspBatch& inputs) {
    return block(block_id).predict_reuse(inputs, *predictor_, cfg_);
  }

  std::size_t total_entries() const {
    std::size_t n = 0;
    for (const auto& c : caches_) n += c.size();
    return n;
  }

  CacheStats stats() const {
    CacheStats total;
    for (const auto& c : caches_) total += c.stats();
    return total;
  }

 private:
  PredictorConfig cfg_;
  std::shared_ptr<const ReusePredictor> predictor_;
  std::vector<BlockCache> caches_;
};

}  // namespace mixres
