#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "shapo/error.hpp"
#include "shapo/parameter_store.hpp"

namespace shapo {

using ScalarLoss = std::function<double(const ParameterStore&)>;

/// Central differences (L(θ + h e_i) - L(θ - h e_i)) / 2h for the requested
/// coordinates (all of them when `coords` is empty). θ is restored bitwise.
inline std::vector<double> finite_difference_gradient(const ScalarLoss& loss, ParameterStore& theta, double h,
                                                      std::span<const std::size_t> coords = {}) {
  detail::require<ConfigError>(h > 0.0, "finite difference step must be positive, got ", h);
  const double a = loss(theta);
  const double b = loss(theta);
  detail::require<NumericError>(a == b || (std::isnan(a) && std::isnan(b)),
                                "loss function is not deterministic: ", a, " vs ", b);

  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(theta.num_coordinates());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coords = all;
  }
  std::vector<double> out(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const std::size_t c = coords[i];
    const double orig = theta.coordinate(c);
    theta.set_coordinate(c, orig + h);
    const double up = loss(theta);
    theta.set_coordinate(c, orig - h);
    const double down = loss(theta);
    theta.set_coordinate(c, orig);
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
  detail::require<ShapeError>(a.size() == b.size(), "relative error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

}  // namespace shapo
