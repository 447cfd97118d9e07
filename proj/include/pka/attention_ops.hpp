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

// Differentiable bindings of the attention kernels for the autodiff tape.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pka/attention_sparse.hpp"
#include "pka/autodiff.hpp"
#include "pka/counters.hpp"

namespace pka::ad {

template <typename T>
struct KeyBlock {
  Var<T> k;
  Var<T> v;
  KeyPattern pattern;
  std::string label;
};

// Joint-softmax attention of q [R x heads*d] over the union of `blocks`,
// evaluated block by block with streaming merges. Backward recomputes the
// block logits from the saved per-row log normalizers.
template <typename T>
Var<T> block_attention(Var<T> q, const std::vector<KeyBlock<T>>& blocks,
                       std::size_t heads, CostCounters* counters = nullptr,
                       const std::string& query_label = "Q") {
  const auto& qv = q.value();
  if (blocks.empty()) throw ContractViolation("block_attention needs at least one block");
  if (heads == 0 || qv.dim(1) % heads != 0) {
    throw ContractViolation("query width not divisible into heads");
  }
  const std::size_t rows = qv.dim(0), width = qv.dim(1), d = width / heads;
  for (const auto& b : blocks) {
    if (b.k.value().dim(1) != width || b.v.value().dim(1) != width ||
        b.k.value().dim(0) != b.v.value().dim(0)) {
      throw ContractViolation("key block '" + b.label + "' has incompatible shape");
    }
  }

  auto out = BasicTensor<T>::matrix(rows, width);
  auto lse = std::make_shared<std::vector<std::vector<T>>>();
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = pka::slice_cols(qv, h * d, d);
    std::optional<PartialAttention<T>> acc;
    for (const auto& b : blocks) {
      KernelTally tally;
      auto part = block_partial(qh, pka::slice_cols(b.k.value(), h * d, d),
                                pka::slice_cols(b.v.value(), h * d, d), b.pattern, &tally);
      if (counters) counters->record(query_label, b.label, tally.pairs, tally.allocated_entries);
      acc = acc ? merge(*acc, part) : std::move(part);
    }
    write_cols(out, h * d, finalize(*acc));
    lse->push_back(acc->log_normalizer());
  }

  std::vector<Var<T>> parents{q};
  std::vector<KeyPattern> patterns;
  for (const auto& b : blocks) {
    parents.push_back(b.k);
    parents.push_back(b.v);
    patterns.push_back(b.pattern);
  }
  auto* tape = q.tape;
  const std::size_t self = tape->size();
  return tape->record(
      "block_attention", std::move(out), parents,
      [tape, self, parents, patterns, lse, heads, d](const auto& g, auto slots) {
        const T scale = T{1} / std::sqrt(static_cast<T>(d));
        const auto& qv = tape->value(parents[0]);
        const auto& ov = tape->value(Var<T>{tape, self});
        const std::size_t rows = qv.dim(0), width = qv.dim(1);
        for (std::size_t h = 0; h < heads; ++h) {
          const auto& row_lse = (*lse)[h];
          std::vector<T> delta(rows, T{0});
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t c = 0; c < d; ++c) {
              delta[i] += g(i, h * d + c) * ov(i, h * d + c);
            }
          }
          for (std::size_t b = 0; b < patterns.size(); ++b) {
            const auto& kv = tape->value(parents[1 + 2 * b]);
            const auto& vv = tape->value(parents[2 + 2 * b]);
            auto* dq = slots[0];
            auto* dk = slots[1 + 2 * b];
            auto* dv = slots[2 + 2 * b];
            const std::size_t keys = kv.dim(0);
            for (std::size_t i = 0; i < rows; ++i) {
              const T* qi = qv.raw() + i * width + h * d;
              const T* gi = g.raw() + i * width + h * d;
              patterns[b].for_each_key(i, keys, [&](std::size_t j) {
                const T* kj = kv.raw() + j * width + h * d;
                const T* vj = vv.raw() + j * width + h * d;
                T s{0}, dp{0};
                for (std::size_t c = 0; c < d; ++c) {
                  s += qi[c] * kj[c];
                  dp += gi[c] * vj[c];
                }
                const T p = std::exp(s * scale - row_lse[i]);
                const T ds = p * (dp - delta[i]) * scale;
                if (dq) {
                  T* dqi = dq->raw() + i * width + h * d;
                  for (std::size_t c = 0; c < d; ++c) dqi[c] += ds * kj[c];
                }
                if (dk) {
                  T* dkj = dk->raw() + j * width + h * d;
                  for (std::size_t c = 0; c < d; ++c) dkj[c] += ds * qi[c];
                }
                if (dv) {
                  T* dvj = dv->raw() + j * width + h * d;
                  for (std::size_t c = 0; c < d; ++c) dvj[c] += p * gi[c];
                }
              });
            }
          }
        }
      });
}

// Dense attention built from tape primitives (matmul, masked softmax). With
// no mask this is the concatenate-and-attend baseline; `allowed` is a
// row-major [Lq x Lk] permission matrix.
template <typename T>
Var<T> dense_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads,
                       const std::vector<std::uint8_t>* allowed = nullptr) {
  const std::size_t width = q.value().dim(1);
  if (heads == 0 || width % heads != 0) {
    throw ContractViolation("query width not divisible into heads");
  }
  const std::size_t d = width / heads;
  const T scale_factor = T{1} / std::sqrt(static_cast<T>(d));
  std::vector<Var<T>> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = slice_cols(q, h * d, d);
    auto kh = slice_cols(k, h * d, d);
    auto vh = slice_cols(v, h * d, d);
    auto scores = scale(matmul_nt(qh, kh), scale_factor);
    auto probs = allowed ? masked_softmax_rows(scores, *allowed) : softmax_rows(scores);
    outs.push_back(matmul(probs, vh));
  }
  return heads == 1 ? outs.front() : concat_cols(outs);
}

}  // namespace pka::ad
