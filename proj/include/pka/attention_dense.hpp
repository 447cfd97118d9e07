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

// Reference attention: full concatenate-and-attend and the dense masked
// oracle that defines the semantics every sparse kernel must reproduce.

#include <cmath>
#include <cstddef>
#include <type_traits>
#include <vector>

#include "pka/counters.hpp"
#include "pka/layout.hpp"
#include "pka/tensor.hpp"

namespace pka {

// Q, K, V are [L x heads*head_dim]; head h occupies columns
// [h*head_dim, (h+1)*head_dim).
template <typename T>
struct AttentionInputs {
  BasicTensor<T> q;
  BasicTensor<T> k;
  BasicTensor<T> v;
  std::size_t heads = 1;

  std::size_t length() const { return q.dim(0); }
  std::size_t head_dim() const { return q.dim(1) / heads; }
  T scale() const { return T{1} / std::sqrt(static_cast<T>(head_dim())); }

  // Throws ContractViolation on inconsistent shapes.
  void validate() const;
};

enum class MaskingMethod {
  // Softmax renormalized over the permitted subset; excluded keys never enter.
  kExactExclusion,
  // Excluded logits replaced by -1e30 before an ordinary row softmax.
  kSentinel,
};

inline constexpr double kMaskSentinel = -1e30;

template <typename T>
constexpr MaskingMethod default_masking() {
  return std::is_same_v<T, double> ? MaskingMethod::kExactExclusion
                                   : MaskingMethod::kSentinel;
}

// Softmax(Q K^T / sqrt(d)) V per head over the whole sequence. Materializes
// an L x L score matrix per head.
template <typename T>
BasicTensor<T> mma_full(const AttentionInputs<T>& inputs,
                        CostCounters* counters = nullptr);

// Dense masked attention over `spec`. When `probabilities` is non-null it
// receives one L x L row-stochastic matrix per head.
template <typename T>
BasicTensor<T> masked_attention_oracle(
    const AttentionInputs<T>& inputs, const AttentionMaskSpec& spec,
    MaskingMethod method = default_masking<T>(),
    std::vector<BasicTensor<T>>* probabilities = nullptr);

extern template struct AttentionInputs<float>;
extern template struct AttentionInputs<double>;
extern template Tensor mma_full(const AttentionInputs<float>&, CostCounters*);
extern template Tensor64 mma_full(const AttentionInputs<double>&, CostCounters*);
extern template Tensor masked_attention_oracle(const AttentionInputs<float>&,
                                               const AttentionMaskSpec&,
                                               MaskingMethod,
                                               std::vector<Tensor>*);
extern template Tensor64 masked_attention_oracle(const AttentionInputs<double>&,
                                                 const AttentionMaskSpec&,
                                                 MaskingMethod,
                                                 std::vector<Tensor64>*);

}  // namespace pka
