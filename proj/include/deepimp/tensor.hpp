#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deepimp/errors.hpp"

namespace deepimp {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array. Activations are laid out channel-first:
// (batch, channels, spatial...).
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  // Rank-0 scalar holding zero.
  BasicTensor() : data_(1, T(0)) {}
  explicit BasicTensor(Shape shape, T fill = T(0));
  BasicTensor(Shape shape, std::vector<T> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const;

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::initializer_list<std::size_t> index);
  const T& at(std::initializer_list<std::size_t> index) const;

  BasicTensor reshape(Shape shape) const;
  void fill(T value);

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  // Element-wise exact comparison (NaN != NaN).
  bool operator==(const BasicTensor& other) const = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

enum class ElementwiseOp { add, sub, mul, max0, tanh };

// Unary ops (max0, tanh) ignore `b`. Binary ops require identical shapes, or
// `b` holding a single element which is applied as a scalar.
template <typename T>
BasicTensor<T> elementwise(ElementwiseOp op, const BasicTensor<T>& a,
                           const BasicTensor<T>* b = nullptr);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseOp::add, a, &b);
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseOp::sub, a, &b);
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseOp::mul, a, &b);
}

// Mean over `axes`; the reduced axes are removed. Reducing every axis yields
// a rank-0 tensor. An empty axis set returns a copy.
template <typename T>
BasicTensor<T> reduce_mean(const BasicTensor<T>& a, std::vector<std::size_t> axes);

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a);

// Concatenate rank-2 tensors along axis 1.
template <typename T>
BasicTensor<T> concat_columns(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
bool all_finite(const BasicTensor<T>& a);

// Plain GEMM over contiguous row-major buffers:
// C (m x n) (+)= op(A) (m x k) * op(B) (k x n).
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const T* a, const T* b, T* c, bool accumulate);

}  // namespace deepimp
