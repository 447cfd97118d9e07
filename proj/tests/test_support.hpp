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

// Independent reference code used only by tests. Nothing here calls into the
// kernels it is used to check.

#include <cmath>
#include <cstddef>
#include <vector>

#include "pka/rng.hpp"
#include "pka/tensor.hpp"

namespace pka::testing {

// Textbook triple loop, i-j-k order, accumulating in long double.
template <typename T>
BasicTensor<T> triple_loop_matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto c = BasicTensor<T>::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      long double acc = 0;
      for (std::size_t p = 0; p < k; ++p) {
        acc += static_cast<long double>(a[i * k + p]) * b[p * n + j];
      }
      c[i * n + j] = static_cast<T>(acc);
    }
  }
  return c;
}

// Per query: explicit loop over permitted keys computing weights by direct
// exp/sum (no max shift, values are small) and the weighted sum of V rows.
// `permit(i, j)` decides membership. Single head, d = q.cols().
template <typename Permit>
Tensor64 two_loop_attention(const Tensor64& q, const Tensor64& k, const Tensor64& v,
                            Permit&& permit) {
  const std::size_t L = q.dim(0), Lk = k.dim(0), d = q.dim(1);
  auto out = Tensor64::matrix(L, v.dim(1));
  for (std::size_t i = 0; i < L; ++i) {
    std::vector<double> w(Lk, 0.0);
    double total = 0.0;
    for (std::size_t j = 0; j < Lk; ++j) {
      if (!permit(i, j)) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += q(i, c) * k(j, c);
      w[j] = std::exp(s / std::sqrt(static_cast<double>(d)));
      total += w[j];
    }
    for (std::size_t j = 0; j < Lk; ++j) {
      if (w[j] == 0.0) continue;
      for (std::size_t c = 0; c < v.dim(1); ++c) out(i, c) += w[j] / total * v(j, c);
    }
  }
  return out;
}

inline Tensor64 random64(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  return random_normal<double>(rng, Shape{rows, cols}, scale);
}

}  // namespace pka::testing
