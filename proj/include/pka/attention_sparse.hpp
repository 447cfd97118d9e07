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

// Block-sparse attention engine. Each (query segment, key segment) block is
// evaluated by a kernel that only touches its permitted pairs and returns a
// PartialAttention; partials are combined with a streaming log-sum-exp merge
// so the result equals one softmax over the union of permitted keys.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pka/attention_dense.hpp"
#include "pka/counters.hpp"
#include "pka/keyword_mask.hpp"
#include "pka/layout.hpp"
#include "pka/tensor.hpp"

namespace pka {

// Running softmax state per query row: max logit m, denominator
// Z = sum exp(logit - m) and numerator sum exp(logit - m) * v.
template <typename T>
struct PartialAttention {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<T> running_max;
  std::vector<T> denominator;
  BasicTensor<T> numerator;
  std::vector<std::size_t> key_count;

  static PartialAttention empty(std::size_t rows, std::size_t dim);

  // log(Z) + m per row; -inf for rows without keys.
  std::vector<T> log_normalizer() const;
};

// Which keys of a block each query row may see.
class KeyPattern {
 public:
  enum class Kind { kFull, kDiagonal, kBand, kRowGated };

  static KeyPattern full() { return KeyPattern(Kind::kFull); }
  static KeyPattern diagonal() { return KeyPattern(Kind::kDiagonal); }
  // k x k window in grid space, k odd.
  static KeyPattern band(GridShape grid, std::size_t k);
  static KeyPattern row_gated(std::vector<std::uint8_t> active);

  Kind kind() const noexcept { return kind_; }
  const GridShape& grid() const noexcept { return grid_; }
  std::size_t radius() const noexcept { return radius_; }
  const std::vector<std::uint8_t>& active() const noexcept { return active_; }

  // Permitted pairs for a block of `rows` queries and `keys` keys.
  std::size_t pairs(std::size_t rows, std::size_t keys) const;
  // Throws AlignmentError / ParameterError when the block shape cannot carry
  // this pattern.
  void check_block(std::size_t rows, std::size_t keys) const;

  template <typename F>
  void for_each_key(std::size_t row, std::size_t keys, F&& fn) const {
    switch (kind_) {
      case Kind::kFull:
        for (std::size_t j = 0; j < keys; ++j) fn(j);
        break;
      case Kind::kDiagonal:
        fn(row);
        break;
      case Kind::kRowGated:
        if (active_[row]) {
          for (std::size_t j = 0; j < keys; ++j) fn(j);
        }
        break;
      case Kind::kBand: {
        const std::size_t y = row / grid_.width, x = row % grid_.width;
        const std::size_t y0 = y >= radius_ ? y - radius_ : 0;
        const std::size_t x0 = x >= radius_ ? x - radius_ : 0;
        const std::size_t y1 = std::min(grid_.height - 1, y + radius_);
        const std::size_t x1 = std::min(grid_.width - 1, x + radius_);
        for (std::size_t yy = y0; yy <= y1; ++yy) {
          for (std::size_t xx = x0; xx <= x1; ++xx) fn(yy * grid_.width + xx);
        }
        break;
      }
    }
  }

 private:
  explicit KeyPattern(Kind kind) : kind_(kind) {}

  Kind kind_;
  GridShape grid_{};
  std::size_t radius_ = 0;
  std::vector<std::uint8_t> active_;
};

// Filled by kernels: pairs evaluated and score entries allocated.
struct KernelTally {
  std::size_t pairs = 0;
  std::size_t allocated_entries = 0;
};

// Generic block kernel; scale defaults to 1/sqrt(d).
template <typename T>
PartialAttention<T> block_partial(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                  const BasicTensor<T>& v, const KeyPattern& pattern,
                                  KernelTally* tally = nullptr);

// Position-aligned attention: query i sees only condition key i. Allocates
// one score per query.
template <typename T>
PartialAttention<T> paa(const BasicTensor<T>& qx, const BasicTensor<T>& k_sp,
                        const BasicTensor<T>& v_sp, KernelTally* tally = nullptr);

// Keyword-scoped attention: active rows see every subject key, inactive rows
// contribute an empty partial.
template <typename T>
PartialAttention<T> ksa(const BasicTensor<T>& qx, const BasicTensor<T>& k_sj,
                        const BasicTensor<T>& v_sj, const KeywordMask& mask,
                        KernelTally* tally = nullptr);

template <typename T>
PartialAttention<T> merge(const PartialAttention<T>& a, const PartialAttention<T>& b);

// Output rows = numerator / denominator. Throws ContractViolation if a row
// saw no key at all.
template <typename T>
BasicTensor<T> finalize(const PartialAttention<T>& p);

template <typename T>
BasicTensor<T> merge_partials(const std::vector<PartialAttention<T>>& parts);

// Pre-threshold keyword affinity per image token. qx is [N x heads*d] and
// k_text is [M x heads*d]; per-head logits sum over keywords and are averaged
// over heads before normalization.
template <typename T>
std::vector<T> keyword_scores(const BasicTensor<T>& qx, const BasicTensor<T>& k_text,
                              std::size_t heads, const std::vector<std::size_t>& keywords,
                              ScoreNormalization mode);

// Thresholded mask at step `step`. Throws DegenerateMaskError when no token
// reaches epsilon.
template <typename T>
KeywordMask ksa_mask(const BasicTensor<T>& qx, const BasicTensor<T>& k_text,
                     std::size_t heads, const std::vector<std::size_t>& keywords,
                     double epsilon, ScoreNormalization mode, int step);

// As ksa_mask but substitutes an all-active mask (fell_back = true) instead
// of throwing.
template <typename T>
KeywordMask ksa_mask_or_fallback(const BasicTensor<T>& qx, const BasicTensor<T>& k_text,
                                 std::size_t heads,
                                 const std::vector<std::size_t>& keywords,
                                 double epsilon, ScoreNormalization mode, int step);

KeyPattern pattern_for(const AttentionMaskSpec& spec, std::size_t query_segment,
                       std::size_t key_segment);

struct EngineOptions {
  // Leave condition rows zero; their outputs come from a condition cache.
  bool skip_condition_rows = false;
};

// Per-block partials for one head and one query segment, labelled by key
// segment name, in segment order.
template <typename T>
std::vector<std::pair<std::string, PartialAttention<T>>> segment_partials(
    const AttentionInputs<T>& inputs, const AttentionMaskSpec& spec,
    std::size_t head, std::size_t query_segment, CostCounters* counters = nullptr);

// Full sequence output under `spec` without materializing an L x L matrix.
template <typename T>
BasicTensor<T> pka_attention(const AttentionInputs<T>& inputs,
                             const AttentionMaskSpec& spec,
                             CostCounters* counters = nullptr,
                             EngineOptions options = {});

}  // namespace pka
