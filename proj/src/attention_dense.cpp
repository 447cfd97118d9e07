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

#include "pka/attention_dense.hpp"

#include <limits>

namespace pka {

template <typename T>
void AttentionInputs<T>::validate() const {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw ContractViolation("attention inputs must be matrices");
  }
  if (heads == 0 || q.dim(1) % heads != 0 || q.dim(1) == 0) {
    throw ContractViolation("query width " + std::to_string(q.dim(1)) +
                            " is not divisible into " + std::to_string(heads) +
                            " heads");
  }
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ContractViolation("Q, K, V must share shape; got " +
                            shape_string(q.shape()) + ", " +
                            shape_string(k.shape()) + ", " +
                            shape_string(v.shape()));
  }
}

template <typename T>
BasicTensor<T> mma_full(const AttentionInputs<T>& inputs, CostCounters* counters) {
  inputs.validate();
  const std::size_t d = inputs.head_dim();
  const std::size_t L = inputs.length();
  const T scale = inputs.scale();
  auto out = BasicTensor<T>::matrix(L, inputs.q.dim(1));
  for (std::size_t h = 0; h < inputs.heads; ++h) {
    const auto qh = slice_cols(inputs.q, h * d, d);
    const auto kh = slice_cols(inputs.k, h * d, d);
    const auto vh = slice_cols(inputs.v, h * d, d);
    auto scores = matmul_nt(qh, kh);
    for (auto& s : scores.data()) s *= scale;
    if (counters) counters->record("*", "*", L * L, scores.size());
    const auto probs = softmax_rows(std::move(scores));
    write_cols(out, h * d, matmul(probs, vh));
  }
  return out;
}

template <typename T>
BasicTensor<T> masked_attention_oracle(const AttentionInputs<T>& inputs,
                                       const AttentionMaskSpec& spec,
                                       MaskingMethod method,
                                       std::vector<BasicTensor<T>>* probabilities) {
  inputs.validate();
  const std::size_t L = inputs.length();
  if (spec.layout().total_length() != L) {
    throw ContractViolation("mask covers " +
                            std::to_string(spec.layout().total_length()) +
                            " tokens but inputs have " + std::to_string(L));
  }
  std::vector<std::uint8_t> allowed(L * L);
  for (std::size_t i = 0; i < L; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < L; ++j) {
      const bool p = spec.permits(i, j);
      allowed[i * L + j] = p;
      any = any || p;
    }
    if (!any) {
      throw ContractViolation("query " + std::to_string(i) + " has no permitted key");
    }
  }

  const std::size_t d = inputs.head_dim();
  const T scale = inputs.scale();
  auto out = BasicTensor<T>::matrix(L, inputs.q.dim(1));
  if (probabilities) probabilities->clear();
  for (std::size_t h = 0; h < inputs.heads; ++h) {
    const auto qh = slice_cols(inputs.q, h * d, d);
    const auto kh = slice_cols(inputs.k, h * d, d);
    const auto vh = slice_cols(inputs.v, h * d, d);
    auto scores = matmul_nt(qh, kh);
    for (std::size_t i = 0; i < L; ++i) {
      auto row = scores.row(i);
      const std::uint8_t* live = allowed.data() + i * L;
      if (method == MaskingMethod::kSentinel) {
        for (std::size_t j = 0; j < L; ++j) {
          row[j] = live[j] ? row[j] * scale : static_cast<T>(kMaskSentinel);
        }
        softmax_row_inplace(row);
        continue;
      }
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < L; ++j) {
        if (live[j]) {
          row[j] *= scale;
          peak = std::max(peak, row[j]);
        }
      }
      T total{0};
      for (std::size_t j = 0; j < L; ++j) {
        row[j] = live[j] ? std::exp(row[j] - peak) : T{0};
        total += row[j];
      }
      for (std::size_t j = 0; j < L; ++j) row[j] /= total;
    }
    write_cols(out, h * d, matmul(scores, vh));
    if (probabilities) probabilities->push_back(std::move(scores));
  }
  return out;
}

template struct AttentionInputs<float>;
template struct AttentionInputs<double>;
template Tensor mma_full(const AttentionInputs<float>&, CostCounters*);
template Tensor64 mma_full(const AttentionInputs<double>&, CostCounters*);
template Tensor masked_attention_oracle(const AttentionInputs<float>&,
                                        const AttentionMaskSpec&, MaskingMethod,
                                        std::vector<Tensor>*);
template Tensor64 masked_attention_oracle(const AttentionInputs<double>&,
                                          const AttentionMaskSpec&, MaskingMethod,
                                          std::vector<Tensor64>*);

}  // namespace pka
