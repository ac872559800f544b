#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shapo/error.hpp"
#include "shapo/hash.hpp"
#include "shapo/tensor.hpp"

namespace shapo {

/// Named parameter tensors with paired gradient buffers. Every scalar gets a
/// global coordinate id; ids are contiguous in insertion order.
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor init) {
    detail::require<ConfigError>(!by_name_.contains(name), "duplicate parameter name '", name, "'");
    const std::size_t offset = total_;
    total_ += init.size();
    Tensor grad(init.shape());
    by_name_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), std::move(init), std::move(grad), offset});
    return entries_.size() - 1;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t num_coordinates() const noexcept { return total_; }

  const std::string& name(std::size_t i) const { return entries_.at(i).name; }
  Tensor& value(std::size_t i) { return entries_.at(i).value; }
  const Tensor& value(std::size_t i) const { return entries_.at(i).value; }
  Tensor& grad(std::size_t i) { return entries_.at(i).grad; }
  const Tensor& grad(std::size_t i) const { return entries_.at(i).grad; }
  std::size_t offset(std::size_t i) const { return entries_.at(i).offset; }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t index_of(const std::string& name) const {
    auto idx = find(name);
    if (!idx) detail::fail<ConfigError>("unknown parameter '", name, "'");
    return *idx;
  }

  Tensor& value(const std::string& name) { return value(index_of(name)); }
  const Tensor& value(const std::string& name) const { return value(index_of(name)); }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(0.0);
  }

  /// Locates the entry owning a global coordinate id.
  std::pair<std::size_t, std::size_t> locate(std::size_t coord) const {
    detail::require<ShapeError>(coord < total_, "coordinate ", coord, " out of range [0, ", total_,
                                ")");
    auto it = std::upper_bound(entries_.begin(), entries_.end(), coord,
                               [](std::size_t c, const Entry& e) { return c < e.offset; });
    const std::size_t idx = static_cast<std::size_t>(it - entries_.begin()) - 1;
    return {idx, coord - entries_[idx].offset};
  }

  double coordinate(std::size_t coord) const {
    auto [e, k] = locate(coord);
    return entries_[e].value[k];
  }
  void set_coordinate(std::size_t coord, double v) {
    auto [e, k] = locate(coord);
    entries_[e].value[k] = v;
  }
  double grad_coordinate(std::size_t coord) const {
    auto [e, k] = locate(coord);
    return entries_[e].grad[k];
  }

  std::vector<double> flat_values() const {
    std::vector<double> out;
    out.reserve(total_);
    for (const auto& e : entries_) out.insert(out.end(), e.value.storage().begin(), e.value.storage().end());
    return out;
  }

  void set_flat_values(std::span<const double> flat) {
    detail::require<ShapeError>(flat.size() == total_, "flat vector of length ", flat.size(),
                                " does not match ", total_, " coordinates");
    for (auto& e : entries_) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(e.offset), e.value.size(), e.value.data());
    }
  }

  std::vector<double> flat_grad() const {
    std::vector<double> out;
    out.reserve(total_);
    for (const auto& e : entries_) out.insert(out.end(), e.grad.storage().begin(), e.grad.storage().end());
    return out;
  }

  /// Gathers values at sorted or unsorted coordinate ids.
  std::vector<double> gather(std::span<const std::size_t> coords) const {
    std::vector<double> out(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i) out[i] = coordinate(coords[i]);
    return out;
  }
  std::vector<double> gather_grad(std::span<const std::size_t> coords) const {
    std::vector<double> out(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i) out[i] = grad_coordinate(coords[i]);
    return out;
  }
  void scatter(std::span<const std::size_t> coords, std::span<const double> vals) {
    detail::require<ShapeError>(coords.size() == vals.size(), "scatter length mismatch");
    for (std::size_t i = 0; i < coords.size(); ++i) set_coordinate(coords[i], vals[i]);
  }

  std::uint64_t checksum() const {
    Fnv1a h;
    for (const auto& e : entries_) {
      h.update(e.name);
      h.update(e.value.values());
    }
    return h.digest();
  }

  bool same_layout(const ParameterStore& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != other.entries_[i].name) return false;
      if (entries_[i].value.shape() != other.entries_[i].value.shape()) return false;
    }
    return true;
  }

 private:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
    std::size_t offset;
  };

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> by_name_;
  std::size_t total_ = 0;
};

}  // namespace shapo
