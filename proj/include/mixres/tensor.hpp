#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mixres/error.hpp"

namespace mixres {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

/// Dense row-major tensor of doubles. Images are (N,C,H,W), single patches
/// (C,H,W), token sequences (N,T,D).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    detail::require(shape_volume(shape_) == data_.size(),
                    "tensor: data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Element of a rank-4 tensor.
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Same data viewed under a different shape of equal volume.
  Tensor reshaped(Shape shape) const& { return Tensor(std::move(shape), data_); }
  Tensor reshaped(Shape shape) && { return Tensor(std::move(shape), std::move(data_)); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Largest absolute elementwise difference; shapes must match.
inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "max_abs_diff: shape mismatch " + shape_string(a.shape()) +
                                              " vs " + shape_string(b.shape()));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] > b[i] ? a[i] - b[i] : b[i] - a[i];
    if (d > worst || d != d) worst = d;
  }
  return worst;
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.data()) {
    if (!(v - v == 0.0)) return false;
  }
  return true;
}

/// Image n of an (N,C,H,W) tensor as a (1,C,H,W) tensor.
inline Tensor image_slice(const Tensor& batch, std::size_t n) {
  detail::require(batch.rank() == 4 && n < batch.dim(0), "image_slice: index out of range");
  const std::size_t per = batch.size() / batch.dim(0);
  std::vector<double> data(batch.data().begin() + static_cast<std::ptrdiff_t>(n * per),
                           batch.data().begin() + static_cast<std::ptrdiff_t>((n + 1) * per));
  return Tensor({1, batch.dim(1), batch.dim(2), batch.dim(3)}, std::move(data));
}

}  // namespace mixres
