#include "deepimp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace deepimp {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_string(shape));
  }
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_size(shape_), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (data_.size() != shape_size(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string(shape_));
  }
}

template <typename T>
std::size_t BasicTensor<T>::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape_));
  }
  return shape_[axis];
}

template <typename T>
std::size_t BasicTensor<T>::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw ShapeError("index rank mismatch for " + shape_string(shape_));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape_[axis]) throw ShapeError("index out of range for " + shape_string(shape_));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T>
T& BasicTensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[offset(index)];
}

template <typename T>
const T& BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(index)];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshape(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return BasicTensor(std::move(shape), data_);
}

template <typename T>
void BasicTensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
BasicTensor<T> elementwise(ElementwiseOp op, const BasicTensor<T>& a, const BasicTensor<T>* b) {
  BasicTensor<T> out(a.shape());
  auto src = a.data();
  auto dst = out.data();
  if (op == ElementwiseOp::max0) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
    return out;
  }
  if (op == ElementwiseOp::tanh) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::tanh(src[i]);
    return out;
  }
  if (b == nullptr) throw ShapeError("binary elementwise op requires a second operand");
  const bool scalar = b->size() == 1 && b->shape() != a.shape();
  if (!scalar && b->shape() != a.shape()) {
    throw ShapeError("elementwise shape mismatch: " + shape_string(a.shape()) + " vs " +
                     shape_string(b->shape()));
  }
  auto rhs = b->data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const T y = scalar ? rhs[0] : rhs[i];
    switch (op) {
      case ElementwiseOp::add: dst[i] = src[i] + y; break;
      case ElementwiseOp::sub: dst[i] = src[i] - y; break;
      case ElementwiseOp::mul: dst[i] = src[i] * y; break;
      default: break;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> reduce_mean(const BasicTensor<T>& a, std::vector<std::size_t> axes) {
  if (axes.empty()) return a;
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  if (axes.back() >= a.rank()) {
    throw ShapeError("reduce axis " + std::to_string(axes.back()) + " invalid for " +
                     shape_string(a.shape()));
  }
  const Shape& in = a.shape();
  std::vector<bool> reduced(in.size(), false);
  for (auto ax : axes) reduced[ax] = true;

  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (reduced[i]) count *= in[i];
    else out_shape.push_back(in[i]);
  }

  std::vector<double> sums(shape_size(out_shape), 0.0);
  // Walk the input in row-major order, tracking the output offset.
  std::vector<std::size_t> idx(in.size(), 0);
  auto src = a.data();
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t out_off = 0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (!reduced[i]) out_off = out_off * in[i] + idx[i];
    }
    sums[out_off] += static_cast<double>(src[flat]);
    for (std::size_t i = in.size(); i-- > 0;) {
      if (++idx[i] < in[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> data(sums.size());
  for (std::size_t i = 0; i < sums.size(); ++i) {
    data[i] = static_cast<T>(sums[i] / static_cast<double>(count));
  }
  return BasicTensor<T>(std::move(out_shape), std::move(data));
}

namespace {

// Eight interleaved partial sums, combined pairwise.
template <typename T>
T dot_product(const T* x, const T* y, std::size_t k) {
  T acc[8] = {};
  std::size_t p = 0;
  for (; p + 8 <= k; p += 8)
    for (std::size_t l = 0; l < 8; ++l) acc[l] += x[p + l] * y[p + l];
  for (; p < k; ++p) acc[0] += x[p] * y[p];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot_product(arow, b + j * k, k);
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t p = 0; p < k; ++p) {
      const T* arow = a + p * m;
      const T* brow = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const T av = arow[i];
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T acc = T(0);
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
    }
  }
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  BasicTensor<T> out({m, n});
  gemm(false, false, m, n, k, a.ptr(), b.ptr(), out.ptr(), false);
  return out;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_string(a.shape()));
  const std::size_t r = a.extent(0), c = a.extent(1);
  BasicTensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return out;
}

template <typename T>
BasicTensor<T> concat_columns(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(0) != b.extent(0)) {
    throw ShapeError("concat shape mismatch: " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const std::size_t rows = a.extent(0), ca = a.extent(1), cb = b.extent(1);
  BasicTensor<T> out({rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.ptr() + r * ca, ca, out.ptr() + r * (ca + cb));
    std::copy_n(b.ptr() + r * cb, cb, out.ptr() + r * (ca + cb) + ca);
  }
  return out;
}

template <typename T>
bool all_finite(const BasicTensor<T>& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](T v) { return std::isfinite(v); });
}

#define DEEPIMP_INSTANTIATE(T)                                                                 \
  template class BasicTensor<T>;                                                               \
  template BasicTensor<T> elementwise(ElementwiseOp, const BasicTensor<T>&,                    \
                                      const BasicTensor<T>*);                                  \
  template BasicTensor<T> reduce_mean(const BasicTensor<T>&, std::vector<std::size_t>);        \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                    \
  template BasicTensor<T> concat_columns(const BasicTensor<T>&, const BasicTensor<T>&);        \
  template bool all_finite(const BasicTensor<T>&);                                             \
  template void gemm(bool, bool, std::size_t, std::size_t, std::size_t, const T*, const T*, T*, \
                     bool);

DEEPIMP_INSTANTIATE(float)
DEEPIMP_INSTANTIATE(double)

#undef DEEPIMP_INSTANTIATE

}  // namespace deepimp
