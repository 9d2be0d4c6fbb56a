#pragma once

#include <vector>

#include "mixres/mixres.hpp"

namespace mixres::testing {

inline Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

inline ConvParams random_conv(Rng& rng, std::size_t cout, std::size_t cin, int k) {
  const auto ks = static_cast<std::size_t>(k);
  return {k, random_tensor({cout, cin, ks, ks}, rng, 0.3), random_tensor({cout}, rng, 0.1)};
}

inline GroupNormParams random_group_norm(Rng& rng, std::size_t c, std::size_t groups) {
  GroupNormParams p;
  p.groups = groups;
  for (std::size_t i = 0; i < c; ++i) {
    p.gamma.push_back(1.0 + 0.2 * rng.normal());
    p.beta.push_back(0.1 * rng.normal());
  }
  return p;
}

inline Linear random_linear(Rng& rng, std::size_t out, std::size_t in) {
  return {random_tensor({out, in}, rng, 0.4), random_tensor({out}, rng, 0.1)};
}

inline AttentionParams random_attention(Rng& rng, std::size_t c) {
  return {random_linear(rng, c, c), random_linear(rng, c, c), random_linear(rng, c, c), random_linear(rng, c, c)};
}

/// Requests with latents of the given sides; ids 0..n-1.
inline std::vector<RequestLatent> random_requests(Rng& rng, std::size_t channels, const std::vector<std::size_t>& sides) {
  std::vector<RequestLatent> out;
  for (std::size_t i = 0; i < sides.size(); ++i) out.push_back({i, random_tensor({channels, sides[i], sides[i]}, rng)});
  return out;
}

/// (C,H,W) -> (1,C,H,W)
inline Tensor batched(const Tensor& t) { return t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)}); }

}  // namespace mixres::testing
