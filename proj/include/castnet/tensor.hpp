#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "castnet/errors.hpp"

namespace castnet {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

// Dense row-major array. Image tensors are channels-last: (N, H, W, C).
// float is the working type; double exists for gradient checks.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor element type must be floating point");

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  Tensor(std::initializer_list<std::size_t> shape, std::initializer_list<T> data)
      : Tensor(Shape(shape), std::vector<T>(data)) {}

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // NHWC accessors; flat = ((n*H + h)*W + w)*C + c
  T& at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) {
    return data_[offset4(n, h, w, c)];
  }
  const T& at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) const {
    return data_[offset4(n, h, w, c)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    }
    return Tensor(std::move(s), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void validate_shape(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (auto d : s) {
      if (d < 1) throw ShapeError("tensor dimension sizes must be >= 1, got " + shape_str(s));
    }
  }

  std::size_t offset4(std::size_t n, std::size_t h, std::size_t w, std::size_t c) const {
    return ((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c;
  }

  Shape shape_;
  std::vector<T> data_;
};

// Stacks equally-shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>* const> items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  const Shape& inner = items.front()->shape();
  Shape out_shape{items.size()};
  out_shape.insert(out_shape.end(), inner.begin(), inner.end());
  std::vector<T> data;
  data.reserve(shape_numel(out_shape));
  for (const auto* t : items) {
    if (t->shape() != inner) {
      throw ShapeError("stack: shape " + shape_str(t->shape()) + " differs from " + shape_str(inner));
    }
    data.insert(data.end(), t->data().begin(), t->data().end());
  }
  return Tensor<T>(std::move(out_shape), std::move(data));
}

// Slice [begin, end) along axis 0.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& t, std::size_t begin, std::size_t end) {
  if (begin >= end || end > t.dim(0)) {
    throw ShapeError("slice_batch: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") of " + shape_str(t.shape()));
  }
  Shape s = t.shape();
  const std::size_t inner = t.size() / s[0];
  s[0] = end - begin;
  std::vector<T> data(t.data().begin() + static_cast<std::ptrdiff_t>(begin * inner),
                      t.data().begin() + static_cast<std::ptrdiff_t>(end * inner));
  return Tensor<T>(std::move(s), std::move(data));
}

}  // namespace castnet
