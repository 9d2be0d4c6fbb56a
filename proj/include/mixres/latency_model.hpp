#pragma once

// Batch latency: the simulator's ground-truth cost model and a small MLP that
// learns it from batch-composition features.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixres/error.hpp"
#include "mixres/patch_format.hpp"
#include "mixres/rng.hpp"

namespace mixres {

/// Number of requests of each resolution class in a batch.
struct Composition {
  std::array<std::size_t, 3> counts{};

  std::size_t& operator[](ResolutionClass r) { return counts[static_cast<std::size_t>(r)]; }
  std::size_t operator[](ResolutionClass r) const { return counts[static_cast<std::size_t>(r)]; }

  std::size_t total() const { return counts[0] + counts[1] + counts[2]; }
  std::size_t distinct() const {
    return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](std::size_t n) { return n > 0; }));
  }
  bool empty() const { return total() == 0; }

  Composition with(ResolutionClass r, std::size_t n = 1) const {
    Composition c = *this;
    c[r] += n;
    return c;
  }

  static Composition of(std::size_t low, std::size_t medium, std::size_t high) { return {{low, medium, high}}; }

  friend auto operator<=>(const Composition&, const Composition&) = default;
};

inline std::string to_string(const Composition& c) {
  return std::to_string(c.counts[0]) + "L" + std::to_string(c.counts[1]) + "M" + std::to_string(c.counts[2]) + "H";
}

struct CostModelParams {
  double c_patch = 0.17;        // ms per patch per block
  double attn_alpha = 0.01;     // ms per image per block per (1000 tokens)^attn_exponent
  double attn_exponent = 1.5;
  double c_res_overhead = 15.0; // ms per distinct resolution per step
  double c_step_fixed = 50.0;   // ms per step
  std::size_t blocks_per_step = 7;
  std::size_t patch_size = 32;
  std::size_t downsample = 8;

  void validate() const {
    detail::require(c_patch >= 0 && attn_alpha >= 0 && c_res_overhead >= 0 && c_step_fixed >= 0,
                    "cost model: coefficients must be non-negative");
    detail::require(attn_exponent >= 1.0, "cost model: attention exponent must be >= 1");
    detail::require(blocks_per_step >= 1 && patch_size >= 1 && downsample >= 1, "cost model: bad geometry");
  }

  std::size_t patches_per_request(ResolutionClass r) const {
    const auto res = Resolution::of(r, downsample);
    detail::require(res.latent_height() % patch_size == 0, "cost model: patch size does not divide latent");
    return (res.latent_height() / patch_size) * (res.latent_width() / patch_size);
  }

  std::size_t tokens(ResolutionClass r) const {
    const auto res = Resolution::of(r, downsample);
    return res.latent_height() * res.latent_width();
  }

  std::array<double, 3> patches_per_class() const {
    return {static_cast<double>(patches_per_request(ResolutionClass::low)),
            static_cast<double>(patches_per_request(ResolutionClass::medium)),
            static_cast<double>(patches_per_request(ResolutionClass::high))};
  }
};

/// Wall time of one denoising step for a batch. `skipped_patch_blocks` patch
/// computations avoided through cache reuse are not charged.
inline double simulate_step_latency(const Composition& comp, const CostModelParams& p,
                                    std::size_t skipped_patch_blocks = 0) {
  detail::require(!comp.empty(), "simulate_step_latency: empty composition");
  double per_block = 0.0;
  std::size_t patches = 0;
  for (auto r : kResolutionClasses) {
    const auto n = comp[r];
    if (n == 0) continue;
    patches += n * p.patches_per_request(r);
    const double kilo_tokens = static_cast<double>(p.tokens(r)) / 1000.0;
    per_block += static_cast<double>(n) * p.attn_alpha * std::pow(kilo_tokens, p.attn_exponent);
  }
  per_block += p.c_patch * static_cast<double>(patches);
  const double blocks = static_cast<double>(p.blocks_per_step);
  const double skipped = std::min(static_cast<double>(skipped_patch_blocks), blocks * static_cast<double>(patches));
  return p.c_step_fixed + p.c_res_overhead * static_cast<double>(comp.distinct()) + blocks * per_block -
         p.c_patch * skipped;
}

/// Latency of serving one request of class r alone for `steps` steps.
inline double standalone_latency(ResolutionClass r, const CostModelParams& p, std::size_t steps) {
  return static_cast<double>(steps) * simulate_step_latency(Composition{}.with(r), p);
}

/// Anything that can estimate per-step latency of a batch.
class StepLatencyPredictor {
 public:
  virtual ~StepLatencyPredictor() = default;
  virtual double step_latency_ms(const Composition& comp) const = 0;
};

/// Uses the ground-truth cost model directly.
class CostModelOracle final : public StepLatencyPredictor {
 public:
  explicit CostModelOracle(CostModelParams p) : params_(p) { params_.validate(); }
  double step_latency_ms(const Composition& comp) const override { return simulate_step_latency(comp, params_); }
  const CostModelParams& params() const noexcept { return params_; }

 private:
  CostModelParams params_;
};

struct FeatureVector {
  static constexpr std::size_t kArity = 5;

  double n_low = 0, n_med = 0, n_high = 0;
  double n_res = 0;
  double n_patches = 0;

  static FeatureVector from(const Composition& c, const std::array<double, 3>& patches_per_class) {
    FeatureVector f;
    f.n_low = static_cast<double>(c.counts[0]);
    f.n_med = static_cast<double>(c.counts[1]);
    f.n_high = static_cast<double>(c.counts[2]);
    f.n_res = static_cast<double>(c.distinct());
    f.n_patches = f.n_low * patches_per_class[0] + f.n_med * patches_per_class[1] + f.n_high * patches_per_class[2];
    return f;
  }

  std::array<double, kArity> values() const { return {n_low, n_med, n_high, n_res, n_patches}; }
};

struct Sample {
  Composition composition;
  double latency_ms = 0.0;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> eval;
};

/// Every non-empty composition with at most `max_batch` requests.
inline std::vector<Composition> all_compositions(std::size_t max_batch) {
  std::vector<Composition> out;
  for (std::size_t l = 0; l <= max_batch; ++l) {
    for (std::size_t m = 0; l + m <= max_batch; ++m) {
      for (std::size_t h = 0; l + m + h <= max_batch; ++h) {
        if (l + m + h > 0) out.push_back(Composition::of(l, m, h));
      }
    }
  }
  return out;
}

/// `n_combos` distinct compositions labelled with the cost model, shuffled by
/// `seed`, the first `train_fraction` of them forming the train split.
inline Dataset generate_dataset(std::size_t n_combos, double train_fraction, const CostModelParams& params,
                                std::uint64_t seed, std::size_t max_batch = 12) {
  detail::require(n_combos >= 2, "generate_dataset: need at least 2 combinations");
  detail::require(train_fraction > 0.0 && train_fraction < 1.0, "generate_dataset: train fraction must be in (0,1)");
  auto pool = all_compositions(max_batch);
  detail::require(n_combos <= pool.size(), "generate_dataset: only " + std::to_string(pool.size()) +
                                               " distinct compositions exist for batch size " +
                                               std::to_string(max_batch));
  Rng rng(seed);
  for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
  pool.resize(n_combos);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n_combos)));
  Dataset d;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    Sample s{pool[i], simulate_step_latency(pool[i], params)};
    (i < n_train ? d.train : d.eval).push_back(s);
  }
  return d;
}

struct TrainConfig {
  std::vector<std::size_t> hidden{32, 32};
  double learning_rate = 0.01;
  std::size_t epochs = 3000;
  std::uint64_t seed = 7;
};

/// Fully connected ReLU network predicting log latency from standardized
/// features.
class MlpPredictor final : public StepLatencyPredictor {
 public:
  struct Layer {
    std::size_t in = 0, out = 0;
    std::vector<double> weight;  // out x in
    std::vector<double> bias;    // out
  };

  MlpPredictor() = default;

  double predict(const FeatureVector& f) const {
    std::vector<double> a(FeatureVector::kArity);
    const auto v = f.values();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = (v[i] - feature_mean_[i]) / feature_std_[i];
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      a = forward_layer(layers_[l], a, l + 1 < layers_.size());
    }
    return std::exp(a[0] * target_std_ + target_mean_);
  }

  double step_latency_ms(const Composition& comp) const override {
    return predict(FeatureVector::from(comp, patches_per_class_));
  }

  std::vector<std::size_t> layer_sizes() const {
    std::vector<std::size_t> out;
    if (layers_.empty()) return out;
    out.push_back(layers_.front().in);
    for (const auto& l : layers_) out.push_back(l.out);
    return out;
  }

  const TrainConfig& train_config() const noexcept { return train_cfg_; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = "mixres-mlp-v1";
    j["layer_sizes"] = layer_sizes();
    j["activation"] = "relu";
    j["feature_mean"] = feature_mean_;
    j["feature_std"] = feature_std_;
    j["target_mean"] = target_mean_;
    j["target_std"] = target_std_;
    j["patches_per_class"] = patches_per_class_;
    j["train"] = {{"hidden", train_cfg_.hidden},
                  {"learning_rate", train_cfg_.learning_rate},
                  {"epochs", train_cfg_.epochs},
                  {"seed", train_cfg_.seed}};
    auto& layers = j["layers"] = nlohmann::json::array();
    for (const auto& l : layers_) layers.push_back({{"weight", l.weight}, {"bias", l.bias}});
    return j;
  }

  static MlpPredictor from_json(const nlohmann::json& j) {
    detail::require(j.value("format", "") == "mixres-mlp-v1", "mlp: unrecognised model format");
    MlpPredictor m;
    const auto sizes = j.at("layer_sizes").get<std::vector<std::size_t>>();
    detail::require(sizes.size() >= 2 && sizes.front() == FeatureVector::kArity && sizes.back() == 1,
                    "mlp: layer sizes must start at the feature arity and end at 1");
    m.feature_mean_ = j.at("feature_mean").get<std::array<double, FeatureVector::kArity>>();
    m.feature_std_ = j.at("feature_std").get<std::array<double, FeatureVector::kArity>>();
    m.target_mean_ = j.at("target_mean").get<double>();
    m.target_std_ = j.at("target_std").get<double>();
    m.patches_per_class_ = j.at("patches_per_class").get<std::array<double, 3>>();
    const auto& t = j.at("train");
    m.train_cfg_.hidden = t.at("hidden").get<std::vector<std::size_t>>();
    m.train_cfg_.learning_rate = t.at("learning_rate").get<double>();
    m.train_cfg_.epochs = t.at("epochs").get<std::size_t>();
    m.train_cfg_.seed = t.at("seed").get<std::uint64_t>();
    const auto& layers = j.at("layers");
    detail::require(layers.size() + 1 == sizes.size(), "mlp: layer count mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      Layer layer{sizes[l], sizes[l + 1], layers[l].at("weight").get<std::vector<double>>(),
                  layers[l].at("bias").get<std::vector<double>>()};
      detail::require(layer.weight.size() == layer.in * layer.out && layer.bias.size() == layer.out,
                      "mlp: layer " + std::to_string(l) + " has inconsistent weights");
      m.layers_.push_back(std::move(layer));
    }
    return m;
  }

  friend MlpPredictor train_predictor(std::span<const Sample>, const CostModelParams&, const TrainConfig&);

 private:
  static std::vector<double> forward_layer(const Layer& l, const std::vector<double>& a, bool relu) {
    std::vector<double> z(l.out);
    for (std::size_t o = 0; o < l.out; ++o) {
      double acc = l.bias[o];
      for (std::size_t i = 0; i < l.in; ++i) acc += l.weight[o * l.in + i] * a[i];
      z[o] = relu ? std::max(acc, 0.0) : acc;
    }
    return z;
  }

  std::vector<Layer> layers_;
  std::array<double, FeatureVector::kArity> feature_mean_{};
  std::array<double, FeatureVector::kArity> feature_std_{};
  double target_mean_ = 0.0;
  double target_std_ = 1.0;
  std::array<double, 3> patches_per_class_{};
  TrainConfig train_cfg_;
};

/// Full-batch Adam on mean squared error of standardized log latency.
inline MlpPredictor train_predictor(std::span<const Sample> train, const CostModelParams& params,
                                    const TrainConfig& cfg = {}) {
  detail::require(!train.empty(), "train_predictor: empty train set");
  detail::require(cfg.learning_rate > 0.0 && cfg.epochs > 0, "train_predictor: bad hyperparameters");
  constexpr std::size_t kIn = FeatureVector::kArity;
  const std::size_t n = train.size();

  MlpPredictor m;
  m.train_cfg_ = cfg;
  m.patches_per_class_ = params.patches_per_class();

  std::vector<std::array<double, kIn>> x(n);
  std::vector<double> y(n);
  for (std::size_t s = 0; s < n; ++s) {
    x[s] = FeatureVector::from(train[s].composition, m.patches_per_class_).values();
    detail::require(train[s].latency_ms > 0.0, "train_predictor: latencies must be positive");
    y[s] = std::log(train[s].latency_ms);
  }
  for (std::size_t i = 0; i < kIn; ++i) {
    double mean = 0.0, sq = 0.0;
    for (const auto& row : x) mean += row[i];
    mean /= static_cast<double>(n);
    for (const auto& row : x) sq += (row[i] - mean) * (row[i] - mean);
    const double sd = std::sqrt(sq / static_cast<double>(n));
    m.feature_mean_[i] = mean;
    m.feature_std_[i] = sd > 1e-12 ? sd : 1.0;
    for (auto& row : x) row[i] = (row[i] - mean) / m.feature_std_[i];
  }
  {
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
    double sq = 0.0;
    for (double v : y) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / static_cast<double>(n));
    m.target_mean_ = mean;
    m.target_std_ = sd > 1e-12 ? sd : 1.0;
    for (double& v : y) v = (v - mean) / m.target_std_;
  }

  std::vector<std::size_t> sizes{kIn};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(1);
  Rng rng(cfg.seed);
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    MlpPredictor::Layer layer{sizes[l], sizes[l + 1], std::vector<double>(sizes[l] * sizes[l + 1]),
                              std::vector<double>(sizes[l + 1], 0.0)};
    const double scale = std::sqrt(2.0 / static_cast<double>(sizes[l]));
    for (double& w : layer.weight) w = scale * rng.normal();
    m.layers_.push_back(std::move(layer));
  }

  // Adam state, one slot per parameter.
  struct Moments {
    std::vector<double> mw, vw, mb, vb;
  };
  std::vector<Moments> adam(m.layers_.size());
  std::vector<Moments> grad(m.layers_.size());
  for (std::size_t l = 0; l < m.layers_.size(); ++l) {
    const auto& L = m.layers_[l];
    adam[l] = {std::vector<double>(L.weight.size()), std::vector<double>(L.weight.size()),
               std::vector<double>(L.bias.size()), std::vector<double>(L.bias.size())};
    grad[l] = adam[l];
  }
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  const std::size_t depth = m.layers_.size();
  std::vector<std::vector<double>> acts(depth + 1);
  std::vector<std::vector<double>> deltas(depth);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (auto& g : grad) {
      std::fill(g.mw.begin(), g.mw.end(), 0.0);
      std::fill(g.mb.begin(), g.mb.end(), 0.0);
    }
    double loss = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      acts[0].assign(x[s].begin(), x[s].end());
      for (std::size_t l = 0; l < depth; ++l) {
        acts[l + 1] = MlpPredictor::forward_layer(m.layers_[l], acts[l], l + 1 < depth);
      }
      const double err = acts[depth][0] - y[s];
      loss += err * err;
      deltas[depth - 1] = {2.0 * err / static_cast<double>(n)};
      for (std::size_t l = depth; l-- > 0;) {
        const auto& L = m.layers_[l];
        auto& g = grad[l];
        for (std::size_t o = 0; o < L.out; ++o) {
          g.mb[o] += deltas[l][o];
          for (std::size_t i = 0; i < L.in; ++i) g.mw[o * L.in + i] += deltas[l][o] * acts[l][i];
        }
        if (l == 0) break;
        auto& prev = deltas[l - 1];
        prev.assign(L.in, 0.0);
        for (std::size_t o = 0; o < L.out; ++o) {
          for (std::size_t i = 0; i < L.in; ++i) prev[i] += L.weight[o * L.in + i] * deltas[l][o];
        }
        for (std::size_t i = 0; i < L.in; ++i) {
          if (acts[l][i] <= 0.0) prev[i] = 0.0;
        }
      }
    }
    loss /= static_cast<double>(n);
    if (!std::isfinite(loss)) {
      throw TrainingError("train_predictor: loss diverged at epoch " + std::to_string(epoch) +
                          " (seed=" + std::to_string(cfg.seed) + ", learning_rate=" +
                          std::to_string(cfg.learning_rate) + ", epochs=" + std::to_string(cfg.epochs) + ")");
    }
    // Cosine-decayed step size.
    const double progress = static_cast<double>(epoch - 1) / static_cast<double>(cfg.epochs);
    const double lr = cfg.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(3.141592653589793 * progress)));
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(epoch));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(epoch));
    auto step = [&](std::vector<double>& param, const std::vector<double>& g, std::vector<double>& m1,
                    std::vector<double>& m2) {
      for (std::size_t i = 0; i < param.size(); ++i) {
        m1[i] = kBeta1 * m1[i] + (1.0 - kBeta1) * g[i];
        m2[i] = kBeta2 * m2[i] + (1.0 - kBeta2) * g[i] * g[i];
        param[i] -= lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + kEps);
      }
    };
    for (std::size_t l = 0; l < depth; ++l) {
      step(m.layers_[l].weight, grad[l].mw, adam[l].mw, adam[l].vw);
      step(m.layers_[l].bias, grad[l].mb, adam[l].mb, adam[l].vb);
    }
  }
  return m;
}

/// Mean of |predicted - actual| / actual.
inline double mean_relative_error(const StepLatencyPredictor& p, std::span<const Sample> samples) {
  detail::require(!samples.empty(), "mean_relative_error: no samples");
  double acc = 0.0;
  for (const auto& s : samples) acc += std::abs(p.step_latency_ms(s.composition) - s.latency_ms) / s.latency_ms;
  return acc / static_cast<double>(samples.size());
}

/// Number of resolution mixes for batches of 1..max_batch requests over
/// `classes` resolutions: sum over i of C(i + classes - 1, classes - 1).
inline std::uint64_t count_combinations(std::uint64_t max_batch, std::uint64_t classes) {
  detail::require(max_batch >= 1 && classes >= 1, "count_combinations: arguments must be >= 1");
  auto binom = [](std::uint64_t n, std::uint64_t k) {
    k = std::min(k, n - k);
    std::uint64_t r = 1;
    for (std::uint64_t j = 1; j <= k; ++j) {
      // r * (n - k + j) is divisible by j at every step.
      const std::uint64_t g = std::gcd(r, j);
      const std::uint64_t num = (n - k + j) / (j / g);
      std::uint64_t next = 0;
      if (__builtin_mul_overflow(r / g, num, &next)) throw std::overflow_error("count_combinations: overflow");
      r = next;
    }
    return r;
  };
  std::uint64_t total = 0;
  for (std::uint64_t i = 1; i <= max_batch; ++i) {
    if (__builtin_add_overflow(total, binom(i + classes - 1, classes - 1), &total)) {
      throw std::overflow_error("count_combinations: overflow");
    }
  }
  return total;
}

}  // namespace mixres
