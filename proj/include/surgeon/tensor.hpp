// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "surgeon/common.hpp"
#include "surgeon/kernels.hpp"

namespace surgeon {

// Dense n-dimensional array, row-major, immutable by convention once built
// (operations return new tensors). float for experiments, double for oracles.
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), T(0)) {}

  TensorT(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != data_.size())
      throw std::invalid_argument("tensor: shape " + shape_str(shape_) +
                                  " does not match data length " +
                                  std::to_string(data_.size()));
  }

  static TensorT scalar(T v) { return TensorT({}, {v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }

  const std::vector<T>& data() const { return data_; }
  std::vector<T>& data() { return data_; }
  const T* ptr() const { return data_.data(); }
  T* ptr() { return data_.data(); }

  T operator[](std::size_t i) const { return data_[i]; }
  T& operator[](std::size_t i) { return data_[i]; }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  // Row-major reinterpretation; element count must be unchanged.
  TensorT reshaped(std::vector<std::size_t> new_shape) const {
    if (shape_numel(new_shape) != data_.size())
      throw std::invalid_argument("reshape: " + shape_str(shape_) + " -> " +
                                  shape_str(new_shape) +
                                  " changes element count");
    return TensorT(std::move(new_shape), data_);
  }

  template <typename U>
  TensorT<U> cast() const {
    if (shape_.empty() && data_.empty()) return TensorT<U>();  // unset tensor
    std::vector<U> d(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i)
      d[i] = static_cast<U>(data_[i]);
    return TensorT<U>(shape_, std::move(d));
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool operator==(const TensorT& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

 private:
  static std::size_t checked_numel(const std::vector<std::size_t>& s) {
    for (std::size_t d : s)
      if (d == 0)
        throw std::invalid_argument("tensor: zero dimension in shape " +
                                    shape_str(s));
    return shape_numel(s);
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// C = A * B for 2-d tensors; summation over k runs left to right.
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  TensorT<T> c({a.dim(0), b.dim(1)});
  kernels::matmul(a.ptr(), b.ptr(), c.ptr(), static_cast<kernels::i64>(a.dim(0)),
                  static_cast<kernels::i64>(a.dim(1)),
                  static_cast<kernels::i64>(b.dim(1)));
  return c;
}

enum class EwOp { add, sub, mul, div, max };

namespace detail {

// Dispatch once, keep the hot loop branch-free so it vectorizes.
template <typename T, typename B, typename F>
void ew_loop(const T* a, B b, T* o, kernels::i64 n, F f) {
#pragma omp parallel for schedule(static)
  for (kernels::i64 i = 0; i < n; ++i) o[i] = f(a[i], b(i));
}

template <typename T, typename B>
void ew_dispatch(EwOp op, const T* a, B b, T* o, kernels::i64 n) {
  switch (op) {
    case EwOp::add: ew_loop(a, b, o, n, [](T x, T y) { return x + y; }); break;
    case EwOp::sub: ew_loop(a, b, o, n, [](T x, T y) { return x - y; }); break;
    case EwOp::mul: ew_loop(a, b, o, n, [](T x, T y) { return x * y; }); break;
    case EwOp::div: ew_loop(a, b, o, n, [](T x, T y) { return x / y; }); break;
    case EwOp::max:
      ew_loop(a, b, o, n, [](T x, T y) { return std::max(x, y); });
      break;
  }
}

}  // namespace detail

template <typename T>
TensorT<T> elementwise(EwOp op, const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("elementwise: shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  if (op == EwOp::div)
    for (std::size_t i = 0; i < b.size(); ++i)
      if (b[i] == T(0))
        throw std::invalid_argument("elementwise: division by zero");
  TensorT<T> out(a.shape());
  const T* pb = b.ptr();
  detail::ew_dispatch(op, a.ptr(), [pb](kernels::i64 i) { return pb[i]; },
                      out.ptr(), static_cast<kernels::i64>(a.size()));
  return out;
}

template <typename T>
TensorT<T> elementwise(EwOp op, const TensorT<T>& a, T scalar) {
  if (op == EwOp::div && scalar == T(0))
    throw std::invalid_argument("elementwise: division by zero");
  TensorT<T> out(a.shape());
  detail::ew_dispatch(op, a.ptr(), [scalar](kernels::i64) { return scalar; },
                      out.ptr(), static_cast<kernels::i64>(a.size()));
  return out;
}

enum class ReduceOp { sum, mean, max };

// Reduce over the given axes (empty = all axes); reduced axes are removed
// from the shape. Elements are combined in ascending flat order.
template <typename T>
TensorT<T> reduce(ReduceOp op, const TensorT<T>& a,
                  std::vector<std::size_t> axes = {}) {
  const std::size_t r = a.rank();
  if (axes.empty())
    for (std::size_t i = 0; i < r; ++i) axes.push_back(i);
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (std::size_t ax : axes)
    if (ax >= r)
      throw std::invalid_argument("reduce: axis " + std::to_string(ax) +
                                  " out of range for shape " +
                                  shape_str(a.shape()));

  std::vector<bool> reduced(r, false);
  for (std::size_t ax : axes) reduced[ax] = true;
  std::vector<std::size_t> out_shape, red_shape;
  for (std::size_t i = 0; i < r; ++i)
    (reduced[i] ? red_shape : out_shape).push_back(a.dim(i));

  std::vector<std::size_t> strides(r, 1);
  for (std::size_t i = r; i-- > 1;) strides[i - 1] = strides[i] * a.dim(i);

  const std::size_t out_n = shape_numel(out_shape);
  const std::size_t red_n = shape_numel(red_shape);
  TensorT<T> out(out_shape);

  std::vector<std::size_t> out_axes, red_axes;
  for (std::size_t i = 0; i < r; ++i)
    (reduced[i] ? red_axes : out_axes).push_back(i);

  for (std::size_t oi = 0; oi < out_n; ++oi) {
    // Base offset of this output cell.
    std::size_t rem = oi, base = 0;
    for (std::size_t d = out_axes.size(); d-- > 0;) {
      std::size_t dimsz = a.dim(out_axes[d]);
      base += (rem % dimsz) * strides[out_axes[d]];
      rem /= dimsz;
    }
    T acc{};
    for (std::size_t ri = 0; ri < red_n; ++ri) {
      std::size_t rrem = ri, off = base;
      for (std::size_t d = red_axes.size(); d-- > 0;) {
        std::size_t dimsz = a.dim(red_axes[d]);
        off += (rrem % dimsz) * strides[red_axes[d]];
        rrem /= dimsz;
      }
      T v = a[off];
      if (ri == 0)
        acc = v;
      else if (op == ReduceOp::max)
        acc = std::max(acc, v);
      else
        acc += v;
    }
    if (op == ReduceOp::mean) acc /= static_cast<T>(red_n);
    out[oi] = acc;
  }
  return out;
}

}  // namespace surgeon
