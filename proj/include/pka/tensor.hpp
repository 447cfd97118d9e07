// Copyright 2026 The pka-engine Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Row-major dense tensors and the handful of kernels the attention engine
// needs. BasicTensor<float> is the working precision; BasicTensor<double> is
// the oracle precision used by equivalence and gradient checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pka/errors.hpp"

namespace pka {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

std::string shape_string(const Shape& shape);

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_product(shape_), T{0}) {}

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size()) {
      throw ContractViolation("tensor data length " +
                              std::to_string(data_.size()) +
                              " does not match shape " + shape_string(shape_));
    }
  }

  static BasicTensor matrix(std::size_t rows, std::size_t cols) {
    return BasicTensor(Shape{rows, cols});
  }

  static BasicTensor matrix(std::size_t rows, std::size_t cols,
                            std::initializer_list<T> values) {
    return BasicTensor(Shape{rows, cols}, std::vector<T>(values));
  }

  static BasicTensor vector(std::initializer_list<T> values) {
    return BasicTensor(Shape{values.size()}, std::vector<T>(values));
  }

  static BasicTensor full(Shape shape, T value) {
    BasicTensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Matrix view helpers; a rank-1 tensor is treated as a single row.
  std::size_t rows() const {
    return rank() == 1 ? 1 : (rank() == 0 ? 0 : size() / shape_.back());
  }
  std::size_t cols() const { return rank() == 0 ? 0 : shape_.back(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) noexcept {
    return data_[r * cols() + c];
  }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols() + c];
  }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  void reshape(Shape shape) {
    if (shape_product(shape) != data_.size()) {
      throw ContractViolation("cannot reshape " + shape_string(shape_) +
                              " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool operator==(const BasicTensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename T>
bool all_finite(const BasicTensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ContractViolation("max_abs_diff shape mismatch " +
                            shape_string(a.shape()) + " vs " +
                            shape_string(b.shape()));
  }
  T worst{0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  return worst;
}

namespace detail {
template <typename T>
void require_matrix(const BasicTensor<T>& t, const char* what) {
  if (t.rank() != 2) {
    throw ContractViolation(std::string(what) + " expects a matrix, got " +
                            shape_string(t.shape()));
  }
}
}  // namespace detail

// c = a · b. Accumulates in the tensor's own precision (fp32 or fp64).
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ContractViolation("matmul inner dimensions disagree: " +
                            shape_string(a.shape()) + " x " +
                            shape_string(b.shape()));
  }
  auto c = BasicTensor<T>::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c.raw() + i * n;
    const T* arow = a.raw() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      const T* brow = b.raw() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

// c = a · bᵀ, the QKᵀ shape.
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ContractViolation("matmul_nt inner dimensions disagree: " +
                            shape_string(a.shape()) + " x " +
                            shape_string(b.shape()) + "^T");
  }
  auto c = BasicTensor<T>::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.raw() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.raw() + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c(i, j) = acc;
    }
  }
  return c;
}

// c = aᵀ · b.
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul_tn");
  detail::require_matrix(b, "matmul_tn");
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ContractViolation("matmul_tn inner dimensions disagree: " +
                            shape_string(a.shape()) + "^T x " +
                            shape_string(b.shape()));
  }
  auto c = BasicTensor<T>::matrix(m, n);
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a.raw() + p * m;
    const T* brow = b.raw() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T aip = arow[i];
      T* crow = c.raw() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::require_matrix(a, "transpose");
  auto t = BasicTensor<T>::matrix(a.dim(1), a.dim(0));
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < a.dim(1); ++j) t(j, i) = a(i, j);
  }
  return t;
}

// Numerically stable row softmax (max subtraction). Rows whose maximum is
// -inf have no live entry and are rejected.
template <typename T>
void softmax_row_inplace(std::span<T> row) {
  T peak = -std::numeric_limits<T>::infinity();
  for (T v : row) peak = std::max(peak, v);
  if (!std::isfinite(peak)) {
    throw ContractViolation("softmax row has no finite entry");
  }
  T total{0};
  for (T& v : row) {
    v = std::exp(v - peak);
    total += v;
  }
  for (T& v : row) v /= total;
}

template <typename T>
BasicTensor<T> softmax_rows(BasicTensor<T> x) {
  const std::size_t r = x.rows();
  for (std::size_t i = 0; i < r; ++i) softmax_row_inplace(x.row(i));
  return x;
}

// Copies columns [begin, begin + count) of a matrix.
template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& a, std::size_t begin,
                          std::size_t count) {
  detail::require_matrix(a, "slice_cols");
  if (begin + count > a.dim(1)) {
    throw ContractViolation("slice_cols out of range");
  }
  auto out = BasicTensor<T>::matrix(a.dim(0), count);
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    std::copy_n(a.raw() + i * a.dim(1) + begin, count, out.raw() + i * count);
  }
  return out;
}

template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& a, std::size_t begin,
                          std::size_t count) {
  detail::require_matrix(a, "slice_rows");
  if (begin + count > a.dim(0)) {
    throw ContractViolation("slice_rows out of range");
  }
  const std::size_t n = a.dim(1);
  std::vector<T> data(a.raw() + begin * n, a.raw() + (begin + count) * n);
  return BasicTensor<T>(Shape{count, n}, std::move(data));
}

template <typename T>
void write_cols(BasicTensor<T>& dst, std::size_t begin,
                const BasicTensor<T>& src) {
  for (std::size_t i = 0; i < src.dim(0); ++i) {
    std::copy_n(src.raw() + i * src.dim(1), src.dim(1),
                dst.raw() + i * dst.dim(1) + begin);
  }
}

template <typename T>
void write_rows(BasicTensor<T>& dst, std::size_t begin,
                const BasicTensor<T>& src) {
  std::copy_n(src.raw(), src.size(), dst.raw() + begin * dst.dim(1));
}

}  // namespace pka
