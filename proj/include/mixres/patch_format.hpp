#pragma once

/**
 * @file patch_format.hpp
 *
 * @brief Compressed sparse patch (CSP) layout for mixed-resolution batches.
 *
 * Every request latent is cut into square `patch_size` tiles. Patches are
 * stored in one flat list ordered by resolution, then by request (arrival
 * order among equal resolutions), then by ordinal within the request. Two
 * offset arrays, in the spirit of CSR row pointers, give O(1) access:
 *
 * - `request_offset[i] .. request_offset[i+1]` are the patches of request i;
 * - `resolution_offset[g] .. resolution_offset[g+1]` are the patches of
 *   resolution group g. Note that this array indexes *patches*, not requests;
 *   the matching request range is available from `resolution_slices()`.
 *
 * Each patch also records its 8-neighbourhood inside its own image so the
 * convolution halo can be gathered without touching image geometry again.
 * Metadata is O(#patches + #requests + #resolutions).
 */

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "mixres/error.hpp"
#include "mixres/tensor.hpp"

namespace mixres {

enum class ResolutionClass : std::uint8_t { low = 0, medium = 1, high = 2 };

inline constexpr std::array<ResolutionClass, 3> kResolutionClasses = {
    ResolutionClass::low, ResolutionClass::medium, ResolutionClass::high};

inline std::string_view to_string(ResolutionClass r) {
  switch (r) {
    case ResolutionClass::low: return "low";
    case ResolutionClass::medium: return "medium";
    case ResolutionClass::high: return "high";
  }
  return "unknown";
}

inline ResolutionClass parse_resolution_class(std::string_view s) {
  if (s == "low" || s == "L" || s == "512") return ResolutionClass::low;
  if (s == "medium" || s == "M" || s == "768") return ResolutionClass::medium;
  if (s == "high" || s == "H" || s == "1024") return ResolutionClass::high;
  throw InvalidArgument("unknown resolution class '" + std::string(s) + "'");
}

struct Resolution {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t downsample = 8;

  std::size_t latent_height() const { return height / downsample; }
  std::size_t latent_width() const { return width / downsample; }

  void validate() const {
    detail::require(downsample > 0 && height > 0 && width > 0, "resolution: dimensions must be positive");
    detail::require(height % downsample == 0 && width % downsample == 0,
                    "resolution: " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible by downsample factor " + std::to_string(downsample));
  }

  static Resolution of(ResolutionClass r, std::size_t downsample = 8) {
    const std::size_t side = r == ResolutionClass::low ? 512 : r == ResolutionClass::medium ? 768 : 1024;
    return {side, side, downsample};
  }

  friend bool operator==(const Resolution&, const Resolution&) = default;
};

/// Greatest common divisor of every latent height and width.
inline std::size_t choose_patch_size(std::span<const Resolution> resolutions) {
  detail::require(!resolutions.empty(), "choose_patch_size: empty resolution set");
  std::size_t ps = 0;
  for (const auto& r : resolutions) {
    r.validate();
    ps = std::gcd(ps, std::gcd(r.latent_height(), r.latent_width()));
  }
  return ps;
}

struct PatchId {
  std::uint64_t request_id = 0;
  std::uint32_t ordinal = 0;

  friend auto operator<=>(const PatchId&, const PatchId&) = default;
};

inline std::string to_string(const PatchId& id) {
  return std::to_string(id.request_id) + ":" + std::to_string(id.ordinal);
}

struct PatchRecord {
  PatchId id;
  std::size_t request_index = 0;  // position in CSP request order
  std::size_t grid_row = 0;
  std::size_t grid_col = 0;
};

enum Direction : std::size_t {
  kNorth = 0,
  kNorthEast,
  kEast,
  kSouthEast,
  kSouth,
  kSouthWest,
  kWest,
  kNorthWest,
};

inline constexpr std::size_t kDirections = 8;
inline constexpr std::array<int, kDirections> kDirRow = {-1, -1, 0, 1, 1, 1, 0, -1};
inline constexpr std::array<int, kDirections> kDirCol = {0, 1, 1, 1, 0, -1, -1, -1};

inline constexpr Direction opposite(Direction d) { return static_cast<Direction>((d + 4) % kDirections); }

using NeighborLinks = std::array<std::optional<std::uint32_t>, kDirections>;

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end - begin; }
  bool contains(std::size_t i) const noexcept { return i >= begin && i < end; }
  friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

/// Geometry of one request's latent.
struct RequestShape {
  std::uint64_t request_id = 0;
  std::size_t latent_height = 0;
  std::size_t latent_width = 0;
};

struct RequestSlot {
  std::uint64_t request_id = 0;
  std::size_t latent_height = 0;
  std::size_t latent_width = 0;
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
};

struct ResolutionSlice {
  std::size_t latent_height = 0;
  std::size_t latent_width = 0;
  IndexRange patches;
  IndexRange requests;
};

/// Immutable patch metadata of a CSP batch.
class CspLayout {
 public:
  /// Builds the layout; `order` receives the CSP position of each input request.
  static std::shared_ptr<const CspLayout> build(std::span<const RequestShape> shapes, std::size_t patch_size,
                                                std::size_t channels, std::vector<std::size_t>* order = nullptr) {
    detail::require(patch_size > 0, "csp: patch size must be positive");
    auto layout = std::shared_ptr<CspLayout>(new CspLayout());
    layout->patch_size_ = patch_size;
    layout->channels_ = channels;

    std::vector<std::size_t> perm(shapes.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
      const auto ka = std::make_tuple(shapes[a].latent_height * shapes[a].latent_width, shapes[a].latent_height);
      const auto kb = std::make_tuple(shapes[b].latent_height * shapes[b].latent_width, shapes[b].latent_height);
      return ka < kb;
    });

    layout->request_offset_.push_back(0);
    layout->resolution_offset_.push_back(0);
    layout->resolution_request_offset_.push_back(0);
    for (std::size_t pos = 0; pos < perm.size(); ++pos) {
      const auto& s = shapes[perm[pos]];
      detail::require(s.latent_height % patch_size == 0 && s.latent_width % patch_size == 0,
                      "csp: latent " + std::to_string(s.latent_height) + "x" + std::to_string(s.latent_width) +
                          " of request " + std::to_string(s.request_id) + " is not divisible by patch size " +
                          std::to_string(patch_size));
      detail::require(s.latent_height > 0 && s.latent_width > 0, "csp: empty latent");
      if (pos > 0) {
        const auto& prev = shapes[perm[pos - 1]];
        if (prev.latent_height != s.latent_height || prev.latent_width != s.latent_width) {
          layout->resolution_offset_.push_back(layout->patches_.size());
          layout->resolution_request_offset_.push_back(pos);
        }
      }
      RequestSlot slot{s.request_id, s.latent_height, s.latent_width, s.latent_height / patch_size,
                       s.latent_width / patch_size};
      const std::size_t base = layout->patches_.size();
      for (std::size_t r = 0; r < slot.grid_rows; ++r) {
        for (std::size_t c = 0; c < slot.grid_cols; ++c) {
          const auto ordinal = static_cast<std::uint32_t>(r * slot.grid_cols + c);
          layout->patches_.push_back({{s.request_id, ordinal}, pos, r, c});
          NeighborLinks links;
          for (std::size_t d = 0; d < kDirections; ++d) {
            const long nr = static_cast<long>(r) + kDirRow[d];
            const long nc = static_cast<long>(c) + kDirCol[d];
            if (nr >= 0 && nc >= 0 && nr < static_cast<long>(slot.grid_rows) &&
                nc < static_cast<long>(slot.grid_cols)) {
              links[d] = static_cast<std::uint32_t>(base + static_cast<std::size_t>(nr) * slot.grid_cols +
                                                    static_cast<std::size_t>(nc));
            }
          }
          layout->neighbors_.push_back(links);
        }
      }
      layout->requests_.push_back(slot);
      layout->request_offset_.push_back(layout->patches_.size());
    }
    if (!perm.empty()) {
      layout->resolution_offset_.push_back(layout->patches_.size());
      layout->resolution_request_offset_.push_back(perm.size());
    }
    if (order) {
      order->assign(shapes.size(), 0);
      for (std::size_t pos = 0; pos < perm.size(); ++pos) (*order)[perm[pos]] = pos;
    }
    return layout;
  }

  std::size_t patch_size() const noexcept { return patch_size_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t num_patches() const noexcept { return patches_.size(); }
  std::size_t num_requests() const noexcept { return requests_.size(); }
  std::size_t num_resolutions() const noexcept {
    return resolution_offset_.empty() ? 0 : resolution_offset_.size() - 1;
  }

  const std::vector<PatchRecord>& patches() const noexcept { return patches_; }
  const PatchRecord& patch(std::size_t i) const { return patches_.at(i); }
  const std::vector<RequestSlot>& requests() const noexcept { return requests_; }
  const RequestSlot& request(std::size_t i) const { return requests_.at(i); }
  const std::vector<NeighborLinks>& neighbors() const noexcept { return neighbors_; }
  const NeighborLinks& neighbors(std::size_t p) const { return neighbors_.at(p); }

  /// Length #requests+1, indexes patches.
  const std::vector<std::size_t>& request_offset() const noexcept { return request_offset_; }
  /// Length #resolutions+1 (or 1 when empty), indexes patches.
  const std::vector<std::size_t>& resolution_offset() const noexcept { return resolution_offset_; }

  IndexRange patches_of_request(std::size_t i) const {
    detail::require(i < requests_.size(), "patches_of_request: index " + std::to_string(i) +
                                              " out of range for " + std::to_string(requests_.size()) +
                                              " requests");
    return {request_offset_[i], request_offset_[i + 1]};
  }

  std::vector<ResolutionSlice> resolution_slices() const {
    std::vector<ResolutionSlice> out;
    for (std::size_t g = 0; g + 1 < resolution_offset_.size(); ++g) {
      const auto& first = requests_[resolution_request_offset_[g]];
      out.push_back({first.latent_height,
                     first.latent_width,
                     {resolution_offset_[g], resolution_offset_[g + 1]},
                     {resolution_request_offset_[g], resolution_request_offset_[g + 1]}});
    }
    return out;
  }

  Shape patch_shape() const { return {channels_, patch_size_, patch_size_}; }

 private:
  CspLayout() = default;

  std::size_t patch_size_ = 0;
  std::size_t channels_ = 0;
  std::vector<PatchRecord> patches_;
  std::vector<RequestSlot> requests_;
  std::vector<NeighborLinks> neighbors_;
  std::vector<std::size_t> request_offset_;
  std::vector<std::size_t> resolution_offset_;
  std::vector<std::size_t> resolution_request_offset_;
};

/// Patch payloads in CSP order over a shared layout. Each payload is (C, ps, ps).
class CspBatch {
 public:
  CspBatch() : layout_(CspLayout::build({}, 1, 0)) {}

  CspBatch(std::shared_ptr<const CspLayout> layout, std::vector<Tensor> payloads)
      : layout_(std::move(layout)), payloads_(std::move(payloads)) {
    detail::require(layout_ != nullptr, "csp: null layout");
    detail::require(payloads_.size() == layout_->num_patches(),
                    "csp: " + std::to_string(payloads_.size()) + " payloads for " +
                        std::to_string(layout_->num_patches()) + " patches");
  }

  const CspLayout& layout() const noexcept { return *layout_; }
  const std::shared_ptr<const CspLayout>& layout_ptr() const noexcept { return layout_; }
  std::size_t size() const noexcept { return payloads_.size(); }
  bool empty() const noexcept { return payloads_.empty(); }

  const std::vector<Tensor>& payloads() const noexcept { return payloads_; }
  const Tensor& payload(std::size_t i) const { return payloads_.at(i); }
  const PatchRecord& record(std::size_t i) const { return layout_->patch(i); }
  PatchId id(std::size_t i) const { return layout_->patch(i).id; }

  /// Same layout, new payloads.
  CspBatch with_payloads(std::vector<Tensor> payloads) const { return CspBatch(layout_, std::move(payloads)); }

 private:
  std::shared_ptr<const CspLayout> layout_;
  std::vector<Tensor> payloads_;
};

/// A request's full latent, (C, H, W).
struct RequestLatent {
  std::uint64_t request_id = 0;
  Tensor latent;
};

/// Cuts each latent into patch_size tiles and lays them out in CSP order.
inline CspBatch split(std::span<const RequestLatent> requests, std::size_t patch_size) {
  std::vector<RequestShape> shapes;
  shapes.reserve(requests.size());
  std::size_t channels = 0;
  for (const auto& r : requests) {
    detail::require(r.latent.rank() == 3, "split: latent must be (C,H,W), got " + shape_string(r.latent.shape()));
    if (shapes.empty()) channels = r.latent.dim(0);
    detail::require(r.latent.dim(0) == channels, "split: all latents must have the same channel count");
    shapes.push_back({r.request_id, r.latent.dim(1), r.latent.dim(2)});
  }
  std::vector<std::size_t> order;
  auto layout = CspLayout::build(shapes, patch_size, channels, &order);
  std::vector<const RequestLatent*> by_pos(requests.size());
  for (std::size_t i = 0; i < requests.size(); ++i) by_pos[order[i]] = &requests[i];

  std::vector<Tensor> payloads;
  payloads.reserve(layout->num_patches());
  const std::size_t ps = patch_size;
  for (const auto& rec : layout->patches()) {
    const Tensor& img = by_pos[rec.request_index]->latent;
    const std::size_t w = img.dim(2);
    Tensor tile({channels, ps, ps});
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t y = 0; y < ps; ++y) {
        const double* src = img.data().data() + (c * img.dim(1) + rec.grid_row * ps + y) * w + rec.grid_col * ps;
        std::copy(src, src + ps, tile.data().data() + (c * ps + y) * ps);
      }
    }
    payloads.push_back(std::move(tile));
  }
  return CspBatch(std::move(layout), std::move(payloads));
}

/// Writes the patches of request `i` into a (C,H,W) image.
inline Tensor reassemble_request(const CspBatch& b, std::size_t i) {
  const auto& lay = b.layout();
  const auto& slot = lay.request(i);
  const auto range = lay.patches_of_request(i);
  const std::size_t ps = lay.patch_size(), c = lay.channels();
  detail::ensure(range.size() == slot.grid_rows * slot.grid_cols,
                 "reassemble: request " + std::to_string(slot.request_id) + " is missing patches");
  Tensor img({c, slot.latent_height, slot.latent_width});
  for (std::size_t p = range.begin; p < range.end; ++p) {
    const auto& rec = lay.patch(p);
    const Tensor& tile = b.payload(p);
    detail::ensure(tile.shape() == lay.patch_shape(),
                   "reassemble: patch " + to_string(rec.id) + " has payload " + shape_string(tile.shape()) +
                       ", expected " + shape_string(lay.patch_shape()));
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < ps; ++y) {
        const double* src = tile.data().data() + (ch * ps + y) * ps;
        std::copy(src, src + ps,
                  img.data().data() + (ch * slot.latent_height + rec.grid_row * ps + y) * slot.latent_width +
                      rec.grid_col * ps);
      }
    }
  }
  return img;
}

/// Inverse of split; requests come back in CSP order.
inline std::vector<RequestLatent> reassemble(const CspBatch& b) {
  std::vector<RequestLatent> out;
  out.reserve(b.layout().num_requests());
  for (std::size_t i = 0; i < b.layout().num_requests(); ++i) {
    out.push_back({b.layout().request(i).request_id, reassemble_request(b, i)});
  }
  return out;
}

inline IndexRange patches_of_request(const CspBatch& b, std::size_t i) { return b.layout().patches_of_request(i); }

inline std::vector<ResolutionSlice> group_by_resolution(const CspBatch& b) { return b.layout().resolution_slices(); }

}  // namespace mixres
