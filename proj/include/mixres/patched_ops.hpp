#pragma once

// Operators over CSP batches that reproduce the whole-image operators exactly.
//
// Convolution needs a one-pixel ring around every patch. The ring is produced
// while normalizing (stitched_group_norm): each patch, as it is normalized,
// scatters its boundary rows, columns and corners into the halo slots of its
// neighbours. Slots whose neighbour does not exist stay zero, which is the
// zero padding of the whole-image convolution. The halo must be complete
// before patched_conv reads it.

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mixres/cache_manager.hpp"
#include "mixres/error.hpp"
#include "mixres/ops.hpp"
#include "mixres/patch_format.hpp"
#include "mixres/tensor.hpp"

namespace mixres {

/// Boundary strips received by each patch from its 8 neighbours.
/// Edge strips hold C*ps values, corners C values, laid out (channel, y, x).
struct HaloBuffer {
  std::size_t width = 0;  // 0 or 1
  std::vector<std::array<std::vector<double>, kDirections>> strips;

  bool empty() const noexcept { return width == 0; }
  std::size_t size() const noexcept { return strips.size(); }
};

namespace detail {

struct StripExtent {
  std::size_t y0, y1, x0, x1;  // half-open ranges inside a ps x ps tile
};

// Pixels of a tile that face direction (dy, dx).
inline StripExtent facing(std::size_t ps, int dy, int dx) {
  StripExtent e{0, ps, 0, ps};
  if (dy < 0) e.y1 = 1;
  if (dy > 0) e.y0 = ps - 1;
  if (dx < 0) e.x1 = 1;
  if (dx > 0) e.x0 = ps - 1;
  return e;
}

inline HaloBuffer make_halo(const CspLayout& lay, std::size_t width) {
  HaloBuffer halo;
  halo.width = width;
  if (width == 0) return halo;
  const std::size_t ps = lay.patch_size(), c = lay.channels();
  halo.strips.resize(lay.num_patches());
  for (auto& dirs : halo.strips) {
    for (std::size_t d = 0; d < kDirections; ++d) {
      const bool corner = kDirRow[d] != 0 && kDirCol[d] != 0;
      dirs[d].assign(corner ? c : c * ps, 0.0);
    }
  }
  return halo;
}

// Copies the pixels of `tile` facing neighbour direction d into that
// neighbour's opposite-direction slot.
inline void emit_halo(const Tensor& tile, std::size_t ps, std::size_t channels, Direction d,
                      std::vector<double>& slot) {
  const auto e = facing(ps, kDirRow[d], kDirCol[d]);
  std::size_t k = 0;
  for (std::size_t ch = 0; ch < channels; ++ch) {
    for (std::size_t y = e.y0; y < e.y1; ++y) {
      for (std::size_t x = e.x0; x < e.x1; ++x) slot[k++] = tile[(ch * ps + y) * ps + x];
    }
  }
}

}  // namespace detail

/// Per-image group normalization over a CSP batch, emitting the halo ring for
/// a following convolution in the same pass.
///
/// Statistics are pooled over all patches of a request, visited in whole-image
/// row-major order, so results match group_norm on the reassembled image.
inline std::pair<CspBatch, HaloBuffer> stitched_group_norm(const CspBatch& b, const GroupNormParams& p,
                                                           std::size_t halo_width = 1) {
  const CspLayout& lay = b.layout();
  const std::size_t c = lay.channels(), ps = lay.patch_size();
  if (b.empty()) return {b, detail::make_halo(lay, halo_width)};
  p.validate(c);
  detail::require(halo_width <= 1, "stitched_group_norm: halo width must be 0 or 1");
  const std::size_t cpg = c / p.groups;

  std::vector<Tensor> out(b.size());
  HaloBuffer halo = detail::make_halo(lay, halo_width);

  for (std::size_t r = 0; r < lay.num_requests(); ++r) {
    const auto& slot = lay.request(r);
    const auto range = lay.patches_of_request(r);
    std::vector<GroupStats> stats(p.groups);
    for (std::size_t g = 0; g < p.groups; ++g) {
      stats[g] = group_stats(
          [&](auto&& f) {
            for (std::size_t ch = g * cpg; ch < (g + 1) * cpg; ++ch) {
              for (std::size_t y = 0; y < slot.latent_height; ++y) {
                const std::size_t gr = y / ps, yy = y % ps;
                for (std::size_t gc = 0; gc < slot.grid_cols; ++gc) {
                  const double* row = b.payload(range.begin + gr * slot.grid_cols + gc).data().data() + (ch * ps + yy) * ps;
                  for (std::size_t xx = 0; xx < ps; ++xx) f(row[xx]);
                }
              }
            }
          },
          p.eps);
    }

    for (std::size_t pi = range.begin; pi < range.end; ++pi) {
      const Tensor& in = b.payload(pi);
      Tensor tile(lay.patch_shape());
      for (std::size_t ch = 0; ch < c; ++ch) {
        const GroupStats& s = stats[ch / cpg];
        for (std::size_t i = 0; i < ps * ps; ++i) {
          const std::size_t idx = ch * ps * ps + i;
          tile[idx] = group_norm_apply(in[idx], s, p.gamma[ch], p.beta[ch]);
        }
      }
      if (halo_width == 1) {
        const auto& links = lay.neighbors(pi);
        for (std::size_t d = 0; d < kDirections; ++d) {
          if (!links[d]) continue;
          const auto dir = static_cast<Direction>(d);
          detail::emit_halo(tile, ps, c, dir, halo.strips[*links[d]][opposite(dir)]);
        }
      }
      out[pi] = std::move(tile);
    }
  }
  return {b.with_payloads(std::move(out)), std::move(halo)};
}

/// Halo ring gathered from current payloads without normalization.
inline HaloBuffer gather_halo(const CspBatch& b, std::size_t width = 1) {
  const CspLayout& lay = b.layout();
  HaloBuffer halo = detail::make_halo(lay, width);
  if (width == 0) return halo;
  for (std::size_t pi = 0; pi < b.size(); ++pi) {
    const auto& links = lay.neighbors(pi);
    for (std::size_t d = 0; d < kDirections; ++d) {
      if (!links[d]) continue;
      const auto dir = static_cast<Direction>(d);
      detail::emit_halo(b.payload(pi), lay.patch_size(), lay.channels(), dir, halo.strips[*links[d]][opposite(dir)]);
    }
  }
  return halo;
}

/// Convolution of every patch using its halo ring for the k=3 border.
inline CspBatch patched_conv(const CspBatch& b, const HaloBuffer& halos, const ConvParams& p) {
  p.validate();
  const CspLayout& lay = b.layout();
  const std::size_t c = lay.channels(), ps = lay.patch_size();
  if (!b.empty()) {
    detail::require(p.in_channels() == c, "patched_conv: kernel expects " + std::to_string(p.in_channels()) +
                                              " channels, batch has " + std::to_string(c));
    // The layout fixes the channel count of every payload.
    detail::require(p.out_channels() == c, "patched_conv: channel-changing convolutions are not supported");
  }
  const auto pad = static_cast<std::size_t>(p.padding());
  if (pad > 0) {
    detail::ensure(halos.width == pad && halos.size() == b.size(),
                   "patched_conv: kernel size " + std::to_string(p.kernel_size) + " needs a halo of width " +
                       std::to_string(pad));
  }
  const std::size_t pw = ps + 2 * pad;
  std::vector<Tensor> out;
  out.reserve(b.size());
  std::vector<double> padded(c * pw * pw);
  for (std::size_t pi = 0; pi < b.size(); ++pi) {
    const Tensor& tile = b.payload(pi);
    std::fill(padded.begin(), padded.end(), 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < ps; ++y) {
        std::copy_n(tile.data().data() + (ch * ps + y) * ps, ps, padded.data() + (ch * pw + y + pad) * pw + pad);
      }
    }
    if (pad > 0) {
      for (std::size_t d = 0; d < kDirections; ++d) {
        const auto& strip = halos.strips[pi][d];
        // Rows/cols of the padded frame that this direction's strip covers.
        const std::size_t y0 = kDirRow[d] < 0 ? 0 : kDirRow[d] > 0 ? ps + 1 : 1;
        const std::size_t y1 = kDirRow[d] == 0 ? ps + 1 : y0 + 1;
        const std::size_t x0 = kDirCol[d] < 0 ? 0 : kDirCol[d] > 0 ? ps + 1 : 1;
        const std::size_t x1 = kDirCol[d] == 0 ? ps + 1 : x0 + 1;
        std::size_t k = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t y = y0; y < y1; ++y) {
            for (std::size_t x = x0; x < x1; ++x) padded[(ch * pw + y) * pw + x] = strip[k++];
          }
        }
      }
    }
    Tensor result({p.out_channels(), ps, ps});
    conv2d_prepadded(p, padded, ps, ps, result.data());
    out.push_back(std::move(result));
  }
  return b.with_payloads(std::move(out));
}

/// Self-attention per image: patches of each resolution group are gathered
/// into an (N_res, T, C) token batch, attended in one call, and scattered back.
/// Tokens are stride x stride cell means (stride 1 = one token per pixel);
/// the stride must divide the patch size. Returns the attention output only.
inline CspBatch patched_self_attention(const CspBatch& b, const AttentionParams& p, std::size_t stride = 1) {
  const CspLayout& lay = b.layout();
  const std::size_t c = lay.channels(), ps = lay.patch_size();
  if (b.empty()) return b;
  detail::require(stride > 0 && ps % stride == 0, "patched_self_attention: token stride must divide the patch size");
  detail::require(p.out.out_features() == c, "patched_self_attention: output projection must preserve channels");
  const std::size_t cells = ps / stride;  // token cells per patch side

  std::vector<Tensor> out(b.size());
  for (const auto& group : lay.resolution_slices()) {
    const std::size_t n = group.requests.size();
    const std::size_t th = group.latent_height / stride, tw = group.latent_width / stride, t = th * tw;
    Tensor tokens({n, t, c});
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t req = group.requests.begin + r;
      const auto range = lay.patches_of_request(req);
      for (std::size_t pi = range.begin; pi < range.end; ++pi) {
        const auto& rec = lay.patch(pi);
        const Tensor& tile = b.payload(pi);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* plane = tile.data().data() + ch * ps * ps;
          for (std::size_t cy = 0; cy < cells; ++cy) {
            for (std::size_t cx = 0; cx < cells; ++cx) {
              const std::size_t token = (rec.grid_row * cells + cy) * tw + rec.grid_col * cells + cx;
              tokens[(r * t + token) * c + ch] = cell_mean(plane, ps, cy * stride, cx * stride, stride);
            }
          }
        }
      }
    }
    const Tensor attended = linear_tokens(
        self_attention(linear_tokens(tokens, p.query), linear_tokens(tokens, p.key), linear_tokens(tokens, p.value)),
        p.out);
    for (std::size_t r = 0; r < n; ++r) {
      const auto range = lay.patches_of_request(group.requests.begin + r);
      for (std::size_t pi = range.begin; pi < range.end; ++pi) {
        const auto& rec = lay.patch(pi);
        Tensor tile(lay.patch_shape());
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t y = 0; y < ps; ++y) {
            for (std::size_t x = 0; x < ps; ++x) {
              const std::size_t token = (rec.grid_row * cells + y / stride) * tw + rec.grid_col * cells + x / stride;
              tile[(ch * ps + y) * ps + x] = attended[(r * t + token) * c + ch];
            }
          }
        }
        out[pi] = std::move(tile);
      }
    }
  }
  return b.with_payloads(std::move(out));
}

/// Elementwise sum of two batches over the same layout.
inline CspBatch patched_residual_add(const CspBatch& x, const CspBatch& y) {
  detail::require(x.size() == y.size(), "patched_residual_add: batch size mismatch");
  std::vector<Tensor> out;
  out.reserve(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out.push_back(residual_add(x.payload(i), y.payload(i)));
  return x.with_payloads(std::move(out));
}

/// Applies a per-patch function (pixel-wise operator) to every patch.
template <typename Fn>
CspBatch map_patches(const CspBatch& b, Fn&& fn) {
  std::vector<Tensor> out;
  out.reserve(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) out.push_back(fn(i, b.payload(i)));
  return b.with_payloads(std::move(out));
}

/// Runs `block` on a batch where masked patches are reused from `cache`.
///
/// Masked positions feed the block their cached previous-step input, so
/// context operators (attention, conv halos) see a complete image; afterwards
/// the masked outputs are replaced by their cached outputs (batched_fill).
/// With every patch masked the block is not invoked at all.
template <typename Block>
CspBatch masked_block_forward(const CspBatch& inputs, const Mask& mask, Block&& block, BlockCache& cache) {
  detail::require(mask.size() == inputs.size(), "masked_block_forward: mask length mismatch");
  const bool all_masked = !inputs.empty() && std::all_of(mask.begin(), mask.end(), [](bool m) { return m; });
  const bool none_masked = std::none_of(mask.begin(), mask.end(), [](bool m) { return m; });
  if (none_masked) return block(inputs);
  if (all_masked) {
    CspBatch filled = cache.batched_fill(inputs, mask);
    ++cache.stats().full_skips;
    return filled;
  }
  std::vector<Tensor> substituted = inputs.payloads();
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    if (!mask[p]) continue;
    const CacheEntry* e = cache.find(inputs.id(p));
    detail::ensure(e != nullptr, "masked_block_forward: masked patch " + to_string(inputs.id(p)) +
                                     " has no cache entry in block " + std::to_string(cache.block_id()));
    substituted[p] = e->input_snapshot;
  }
  return cache.batched_fill(block(inputs.with_payloads(std::move(substituted))), mask);
}

}  // namespace mixres
