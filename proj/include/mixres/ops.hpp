#pragma once

// Dense reference kernels shared by the whole-image path and the patched path.
// Every reduction runs in a fixed left-to-right order so both paths can
// reproduce each other bit for bit when they visit elements in the same order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mixres/error.hpp"
#include "mixres/tensor.hpp"

namespace mixres {

struct ConvParams {
  int kernel_size = 1;
  Tensor weight;  // (C_out, C_in, k, k)
  Tensor bias;    // (C_out)

  int padding() const noexcept { return kernel_size / 2; }
  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }

  void validate() const {
    detail::require(kernel_size == 1 || kernel_size == 3, "conv: kernel_size must be 1 or 3");
    const auto k = static_cast<std::size_t>(kernel_size);
    detail::require(weight.rank() == 4 && weight.dim(2) == k && weight.dim(3) == k,
                    "conv: weight must be (C_out,C_in,k,k), got " + shape_string(weight.shape()));
    detail::require(bias.rank() == 1 && bias.dim(0) == weight.dim(0), "conv: bias must be (C_out)");
  }
};

struct GroupNormParams {
  std::size_t groups = 1;
  double eps = 1e-5;
  std::vector<double> gamma;
  std::vector<double> beta;

  void validate(std::size_t channels) const {
    detail::require(groups > 0 && channels % groups == 0,
                    "group_norm: groups (" + std::to_string(groups) + ") must divide C (" +
                        std::to_string(channels) + ")");
    detail::require(eps > 0.0, "group_norm: eps must be positive");
    detail::require(gamma.size() == channels && beta.size() == channels,
                    "group_norm: gamma/beta must have one entry per channel");
  }
};

/// Dense layer; pixelwise on channel-first images, per-token on (N,T,D).
struct Linear {
  Tensor weight;  // (C_out, C_in)
  Tensor bias;    // (C_out)

  std::size_t out_features() const { return weight.dim(0); }
  std::size_t in_features() const { return weight.dim(1); }

  void validate(std::size_t in) const {
    detail::require(weight.rank() == 2 && bias.rank() == 1 && bias.dim(0) == weight.dim(0),
                    "linear: weight must be (C_out,C_in) with bias (C_out)");
    detail::require(weight.dim(1) == in, "linear: expected " + std::to_string(weight.dim(1)) +
                                             " input channels, got " + std::to_string(in));
  }
};

struct FeedForwardParams {
  Linear up;
  Linear down;
};

struct AttentionParams {
  Linear query;
  Linear key;
  Linear value;
  Linear out;
};

// ---------------------------------------------------------------------------
// Convolution

/// One output plane position of a convolution over a zero-padded window.
/// `window` holds C_in planes of `stride_h x stride_w`; (oh, ow) is the top-left
/// corner of the k x k receptive field inside it.
inline double conv_point(const ConvParams& p, std::size_t co, std::span<const double> window,
                         std::size_t plane_h, std::size_t plane_w, std::size_t oh, std::size_t ow) {
  const auto k = static_cast<std::size_t>(p.kernel_size);
  const std::size_t cin = p.in_channels();
  double acc = p.bias[co];
  for (std::size_t ci = 0; ci < cin; ++ci) {
    const double* plane = window.data() + ci * plane_h * plane_w;
    const double* wk = p.weight.data().data() + (co * cin + ci) * k * k;
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        acc += wk[kh * k + kw] * plane[(oh + kh) * plane_w + (ow + kw)];
      }
    }
  }
  return acc;
}

/// Convolution of a (C_in, h+2p, w+2p) pre-padded plane stack into (C_out, h, w).
inline void conv2d_prepadded(const ConvParams& p, std::span<const double> padded, std::size_t h,
                             std::size_t w, std::span<double> out) {
  const auto pad = static_cast<std::size_t>(p.padding());
  const std::size_t ph = h + 2 * pad;
  const std::size_t pw = w + 2 * pad;
  for (std::size_t co = 0; co < p.out_channels(); ++co) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        out[(co * h + y) * w + x] = conv_point(p, co, padded, ph, pw, y, x);
      }
    }
  }
}

/// Stride-1 convolution with zero padding k/2 on an (N,C_in,H,W) tensor.
inline Tensor conv2d(const Tensor& x, const ConvParams& p) {
  p.validate();
  detail::require(x.rank() == 4, "conv2d: input must be (N,C,H,W), got " + shape_string(x.shape()));
  detail::require(x.dim(1) == p.in_channels(),
                  "conv2d: input has " + std::to_string(x.dim(1)) + " channels, kernel expects " +
                      std::to_string(p.in_channels()));
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto pad = static_cast<std::size_t>(p.padding());
  const std::size_t ph = h + 2 * pad, pw = w + 2 * pad;
  Tensor out({n, p.out_channels(), h, w});
  std::vector<double> padded(cin * ph * pw, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) {
          padded[(ci * ph + y + pad) * pw + xx + pad] = x.at(b, ci, y, xx);
        }
      }
    }
    const std::size_t per = p.out_channels() * h * w;
    conv2d_prepadded(p, padded, h, w, out.data().subspan(b * per, per));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Group normalization

struct GroupStats {
  double mean = 0.0;
  double inv_std = 1.0;
};

/// Two-pass statistics over values produced by `visit(f)`, which must call f
/// on every element of the group in a fixed order. Called twice.
template <typename Visit>
GroupStats group_stats(Visit&& visit, double eps) {
  double sum = 0.0;
  std::size_t count = 0;
  visit([&](double v) {
    sum += v;
    ++count;
  });
  const double mean = sum / static_cast<double>(count);
  double sq = 0.0;
  visit([&](double v) {
    const double d = v - mean;
    sq += d * d;
  });
  const double var = sq / static_cast<double>(count);
  return {mean, 1.0 / std::sqrt(var + eps)};
}

inline double group_norm_apply(double v, const GroupStats& s, double gamma, double beta) {
  return (v - s.mean) * s.inv_std * gamma + beta;
}

/// Group normalization with statistics pooled per (image, group).
inline Tensor group_norm(const Tensor& x, const GroupNormParams& p) {
  detail::require(x.rank() == 4, "group_norm: input must be (N,C,H,W)");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  p.validate(c);
  const std::size_t cpg = c / p.groups;
  Tensor out(x.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t g = 0; g < p.groups; ++g) {
      const double* base = x.data().data() + (b * c + g * cpg) * hw;
      const auto stats = group_stats(
          [&](auto&& f) {
            for (std::size_t i = 0; i < cpg * hw; ++i) f(base[i]);
          },
          p.eps);
      for (std::size_t ch = g * cpg; ch < (g + 1) * cpg; ++ch) {
        for (std::size_t i = 0; i < hw; ++i) {
          const std::size_t idx = (b * c + ch) * hw + i;
          out[idx] = group_norm_apply(x[idx], stats, p.gamma[ch], p.beta[ch]);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

namespace detail {

inline void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v) {
  require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "self_attention: q,k,v must be (N,T,D)");
  require(q.shape() == k.shape() && k.shape() == v.shape(),
          "self_attention: q,k,v shapes differ: " + shape_string(q.shape()) + " " +
              shape_string(k.shape()) + " " + shape_string(v.shape()));
}

/// Softmax row for query i of batch b, written into `row` (length T).
inline void attention_row(const Tensor& q, const Tensor& k, std::size_t b, std::size_t i,
                          std::span<double> row) {
  const std::size_t t = q.dim(1), d = q.dim(2);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double* qi = q.data().data() + (b * t + i) * d;
  double peak = -HUGE_VAL;
  for (std::size_t j = 0; j < t; ++j) {
    const double* kj = k.data().data() + (b * t + j) * d;
    double dot = 0.0;
    for (std::size_t e = 0; e < d; ++e) dot += qi[e] * kj[e];
    row[j] = dot * scale;
    peak = std::max(peak, row[j]);
  }
  double total = 0.0;
  for (std::size_t j = 0; j < t; ++j) {
    row[j] = std::exp(row[j] - peak);
    total += row[j];
  }
  for (std::size_t j = 0; j < t; ++j) row[j] /= total;
}

}  // namespace detail

/// Softmax(QK^T / sqrt(D)) as an (N,T,T) tensor.
inline Tensor attention_probabilities(const Tensor& q, const Tensor& k) {
  detail::check_qkv(q, k, k);
  const std::size_t n = q.dim(0), t = q.dim(1);
  Tensor probs({n, t, t});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < t; ++i) {
      detail::attention_row(q, k, b, i, probs.data().subspan((b * t + i) * t, t));
    }
  }
  return probs;
}

/// Scaled dot-product attention over (N,T,D) inputs; batches are independent.
inline Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  detail::check_qkv(q, k, v);
  const std::size_t n = q.dim(0), t = q.dim(1), d = q.dim(2);
  Tensor out(q.shape());
  std::vector<double> row(t);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < t; ++i) {
      detail::attention_row(q, k, b, i, row);
      double* oi = out.data().data() + (b * t + i) * d;
      for (std::size_t j = 0; j < t; ++j) {
        const double* vj = v.data().data() + (b * t + j) * d;
        for (std::size_t e = 0; e < d; ++e) oi[e] += row[j] * vj[e];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pixel-wise operators

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)); }

namespace detail {

// Channel-first layout: rank 4 (N,C,H,W) or rank 3 (C,H,W) treated as N=1.
struct PlanarView {
  std::size_t outer;
  std::size_t channels;
  std::size_t pixels;
};

inline PlanarView planar(const Tensor& x) {
  require(x.rank() == 3 || x.rank() == 4, "pixelwise: expected (N,C,H,W) or (C,H,W), got " +
                                              shape_string(x.shape()));
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  return {1, x.dim(0), x.dim(1) * x.dim(2)};
}

inline Shape with_channels(const Shape& s, std::size_t c) {
  Shape out = s;
  out[s.size() == 4 ? 1 : 0] = c;
  return out;
}

}  // namespace detail

/// Per-pixel dense layer over channels, plus an optional extra per-channel bias.
inline Tensor linear(const Tensor& x, const Linear& lin, std::span<const double> extra_bias = {}) {
  const auto v = detail::planar(x);
  lin.validate(v.channels);
  const std::size_t cout = lin.out_features();
  detail::require(extra_bias.empty() || extra_bias.size() == cout, "linear: extra bias size mismatch");
  Tensor out(detail::with_channels(x.shape(), cout));
  for (std::size_t b = 0; b < v.outer; ++b) {
    const double* in = x.data().data() + b * v.channels * v.pixels;
    double* o = out.data().data() + b * cout * v.pixels;
    for (std::size_t px = 0; px < v.pixels; ++px) {
      for (std::size_t co = 0; co < cout; ++co) {
        double acc = lin.bias[co];
        for (std::size_t ci = 0; ci < v.channels; ++ci) {
          acc += lin.weight[co * v.channels + ci] * in[ci * v.pixels + px];
        }
        if (!extra_bias.empty()) acc += extra_bias[co];
        o[co * v.pixels + px] = acc;
      }
    }
  }
  return out;
}

inline Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (double& e : out.data()) e = gelu(e);
  return out;
}

/// linear -> GELU -> linear, per pixel. `extra_bias` is added after the second layer.
inline Tensor feed_forward(const Tensor& x, const FeedForwardParams& p,
                           std::span<const double> extra_bias = {}) {
  return linear(gelu(linear(x, p.up)), p.down, extra_bias);
}

inline Tensor residual_add(const Tensor& x, const Tensor& y) {
  detail::require(x.shape() == y.shape(), "residual_add: shape mismatch " + shape_string(x.shape()) +
                                              " vs " + shape_string(y.shape()));
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return out;
}

/// Per-pixel normalization across channels (no learned affine).
inline Tensor channel_norm(const Tensor& x, double eps = 1e-6) {
  const auto v = detail::planar(x);
  Tensor out(x.shape());
  for (std::size_t b = 0; b < v.outer; ++b) {
    const double* in = x.data().data() + b * v.channels * v.pixels;
    double* o = out.data().data() + b * v.channels * v.pixels;
    for (std::size_t px = 0; px < v.pixels; ++px) {
      const auto stats = group_stats(
          [&](auto&& f) {
            for (std::size_t c = 0; c < v.channels; ++c) f(in[c * v.pixels + px]);
          },
          eps);
      for (std::size_t c = 0; c < v.channels; ++c) {
        o[c * v.pixels + px] = group_norm_apply(in[c * v.pixels + px], stats, 1.0, 0.0);
      }
    }
  }
  return out;
}

/// Per-token dense layer on channel-last (N,T,D_in) input.
inline Tensor linear_tokens(const Tensor& x, const Linear& lin) {
  detail::require(x.rank() == 3, "linear_tokens: expected (N,T,D)");
  lin.validate(x.dim(2));
  const std::size_t rows = x.dim(0) * x.dim(1), din = x.dim(2), dout = lin.out_features();
  Tensor out({x.dim(0), x.dim(1), dout});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t co = 0; co < dout; ++co) {
      double acc = lin.bias[co];
      for (std::size_t ci = 0; ci < din; ++ci) acc += lin.weight[co * din + ci] * x[r * din + ci];
      out[r * dout + co] = acc;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Token pooling for attention. Each token is the mean of a stride x stride cell;
// with stride 1 every pixel is a token.

/// Mean of the cell whose top-left pixel is (y, x) in a single plane of width `plane_w`.
inline double cell_mean(const double* plane, std::size_t plane_w, std::size_t y, std::size_t x,
                        std::size_t stride) {
  if (stride == 1) return plane[y * plane_w + x];
  double acc = 0.0;
  for (std::size_t dy = 0; dy < stride; ++dy) {
    for (std::size_t dx = 0; dx < stride; ++dx) acc += plane[(y + dy) * plane_w + x + dx];
  }
  return acc / static_cast<double>(stride * stride);
}

/// Attention over pooled tokens of each image; returns the projected output
/// broadcast back to pixel resolution, (N,C,H,W).
inline Tensor attention_layer(const Tensor& x, const AttentionParams& p, std::size_t stride) {
  detail::require(x.rank() == 4, "attention_layer: input must be (N,C,H,W)");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  detail::require(stride > 0 && h % stride == 0 && w % stride == 0,
                  "attention_layer: token stride must divide the image");
  const std::size_t th = h / stride, tw = w / stride, t = th * tw;
  Tensor tokens({n, t, c});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* plane = x.data().data() + (b * c + ch) * h * w;
      for (std::size_t r = 0; r < th; ++r) {
        for (std::size_t col = 0; col < tw; ++col) {
          tokens[(b * t + r * tw + col) * c + ch] = cell_mean(plane, w, r * stride, col * stride, stride);
        }
      }
    }
  }
  const Tensor attended = linear_tokens(
      self_attention(linear_tokens(tokens, p.query), linear_tokens(tokens, p.key),
                     linear_tokens(tokens, p.value)),
      p.out);
  const std::size_t cout = p.out.out_features();
  Tensor out({n, cout, h, w});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < cout; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) {
          out.at(b, ch, y, xx) = attended[(b * t + (y / stride) * tw + xx / stride) * cout + ch];
        }
      }
    }
  }
  return out;
}

}  // namespace mixres
