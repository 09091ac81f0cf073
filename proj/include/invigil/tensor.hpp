#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "invigil/error.hpp"

namespace invigil {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    out << (i ? "," : "") << shape[i];
  }
  out << ')';
  return out.str();
}

/// Dense row-major array. Image batches use N x C x H x W layout.
template <typename T>
class Tensor {
public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h,
              std::size_t w) const noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  /// Reinterpret the same values under a new shape of equal size.
  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const noexcept {
    // x - x is 0 for finite x and NaN otherwise; the product folds to NaN.
    constexpr std::size_t lanes = 16;
    T probe[lanes] = {};
    const std::size_t n = data_.size(), whole = n - n % lanes;
    for (std::size_t i = 0; i < whole; i += lanes) {
      for (std::size_t j = 0; j < lanes; ++j) probe[j] *= data_[i + j] - data_[i + j];
    }
    T tail{0};
    for (std::size_t i = whole; i < n; ++i) tail *= data_[i] - data_[i];
    for (T v : probe) tail *= v;
    return tail == T{0};
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

  void require_same_shape(const Tensor& other, const char* what) const {
    if (shape_ != other.shape_) {
      throw ShapeError(std::string(what) + ": shape " + shape_string(shape_) +
                       " vs " + shape_string(other.shape_));
    }
  }

private:
  void check_extents() const {
    for (auto extent : shape_) {
      if (extent == 0) {
        throw ShapeError("tensor extents must be positive, got " +
                         shape_string(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Largest absolute elementwise difference; shapes must match.
template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "max_abs_diff");
  T worst{0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  return worst;
}

} // namespace invigil
