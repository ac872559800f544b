#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "shapo/error.hpp"

namespace shapo {

/// Dense row-major tensor of doubles. Rank 1 tensors behave as a single row
/// in matrix operations; scalars have shape [1].
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(extent_product(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    detail::require<ShapeError>(data_.size() == extent_product(shape_), "tensor data length ",
                                data_.size(), " does not match shape ", shape_string(shape_));
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  static Tensor vector(std::vector<double> data) {
    const std::size_t n = data.size();
    return Tensor({n}, std::move(data));
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const noexcept {
    return shape_.empty() ? 0 : shape_.back();
  }
  bool is_scalar() const noexcept { return data_.size() == 1; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols(), cols()};
  }

  double item() const {
    detail::require<ShapeError>(is_scalar(), "item() on non-scalar tensor ", shape_string(shape_));
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static std::size_t extent_product(const std::vector<std::size_t>& shape) {
    for (std::size_t e : shape) {
      detail::require<ShapeError>(e > 0, "tensor extents must be positive, got ",
                                  shape_string(shape));
    }
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) noexcept { return std::sqrt(dot(a, a)); }

}  // namespace shapo
