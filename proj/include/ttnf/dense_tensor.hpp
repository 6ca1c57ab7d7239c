#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ttnf/error.hpp"
#include "ttnf/memory.hpp"

namespace ttnf {

inline std::size_t product(std::span<const std::size_t> xs) {
  return std::accumulate(xs.begin(), xs.end(), std::size_t{1}, std::multiplies<>());
}

// Row-major dense array with arbitrary extents.
template <typename T>
class DenseTensor {
 public:
  DenseTensor() = default;

  explicit DenseTensor(std::vector<std::size_t> extents)
      : extents_(std::move(extents)), data_(product(extents_), T(0)) {
    for (auto e : extents_) detail::require<ShapeError>(e >= 1, "DenseTensor: zero extent");
  }

  DenseTensor(std::vector<std::size_t> extents, Buffer<T> data)
      : extents_(std::move(extents)), data_(std::move(data)) {
    for (auto e : extents_) detail::require<ShapeError>(e >= 1, "DenseTensor: zero extent");
    detail::require<ShapeError>(product(extents_) == data_.size(),
                                "DenseTensor: data length does not match extents");
  }

  const std::vector<std::size_t>& extents() const { return extents_; }
  std::size_t rank() const { return extents_.size(); }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  Buffer<T>& storage() { return data_; }
  const Buffer<T>& storage() const { return data_; }

  T& operator[](std::size_t flat) { return data_[flat]; }
  const T& operator[](std::size_t flat) const { return data_[flat]; }

  std::size_t flat_index(std::span<const std::size_t> idx) const {
    detail::require<IndexError>(idx.size() == extents_.size(), "DenseTensor: index arity");
    std::size_t flat = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      detail::require<IndexError>(idx[k] < extents_[k], "DenseTensor: index out of range");
      flat = flat * extents_[k] + idx[k];
    }
    return flat;
  }

  bool all_finite() const {
    for (const T& x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  double frobenius_norm() const {
    long double acc = 0;
    for (const T& x : data_) acc += static_cast<long double>(x) * x;
    return static_cast<double>(std::sqrt(acc));
  }

 private:
  std::vector<std::size_t> extents_;
  Buffer<T> data_;
};

// Root mean squared difference of two tensors with identical extents.
template <typename T>
double rmse(const DenseTensor<T>& a, const DenseTensor<T>& b) {
  detail::require<ShapeError>(a.extents() == b.extents(), "rmse: extent mismatch");
  long double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const long double d = static_cast<long double>(a[i]) - b[i];
    acc += d * d;
  }
  return static_cast<double>(std::sqrt(acc / static_cast<long double>(a.size())));
}

// Frobenius norm of a - b.
template <typename T>
double frobenius_distance(const DenseTensor<T>& a, const DenseTensor<T>& b) {
  detail::require<ShapeError>(a.extents() == b.extents(), "frobenius_distance: extent mismatch");
  long double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const long double d = static_cast<long double>(a[i]) - b[i];
    acc += d * d;
  }
  return static_cast<double>(std::sqrt(acc));
}

}  // namespace ttnf
