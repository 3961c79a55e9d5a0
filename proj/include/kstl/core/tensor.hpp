#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kstl/core/errors.hpp"

namespace kstl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. Every dimension is positive and the buffer length
/// always equals the product of the shape.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_dims();
    values_.assign(shape_product(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_dims();
    if (shape_product(shape_) != values_.size()) {
      throw ConfigError("tensor shape " + shape_string(shape_) + " holds " +
                        std::to_string(shape_product(shape_)) + " values, got " +
                        std::to_string(values_.size()));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  /// NCHW element access for rank-4 tensors.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

  bool all_finite() const {
    for (const T& v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(values_.size());
    for (std::size_t i = 0; i < values_.size(); ++i) out[i] = static_cast<U>(values_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), values_); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  void check_dims() const {
    for (std::size_t d : shape_)
      if (d == 0) throw ConfigError("tensor dimensions must be positive, got " + shape_string(shape_));
  }

  Shape shape_;
  std::vector<T> values_;
};

/// Throws NumericError naming `where` if the tensor holds NaN or Inf.
template <typename T>
void require_finite(const Tensor<T>& t, const std::string& where) {
  if (!t.all_finite()) throw NumericError("non-finite value produced by " + where);
}

}  // namespace kstl
