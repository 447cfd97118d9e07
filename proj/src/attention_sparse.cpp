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

#include "pka/attention_sparse.hpp"

#include <cmath>
#include <limits>

namespace pka {

template <typename T>
PartialAttention<T> PartialAttention<T>::empty(std::size_t rows, std::size_t dim) {
  PartialAttention p;
  p.rows = rows;
  p.dim = dim;
  p.running_max.assign(rows, -std::numeric_limits<T>::infinity());
  p.denominator.assign(rows, T{0});
  p.numerator = BasicTensor<T>::matrix(rows, dim);
  p.key_count.assign(rows, 0);
  return p;
}

template <typename T>
std::vector<T> PartialAttention<T>::log_normalizer() const {
  std::vector<T> out(rows, -std::numeric_limits<T>::infinity());
  for (std::size_t i = 0; i < rows; ++i) {
    if (key_count[i] > 0) out[i] = running_max[i] + std::log(denominator[i]);
  }
  return out;
}

KeyPattern KeyPattern::band(GridShape grid, std::size_t k) {
  if (k == 0 || k % 2 == 0) {
    throw ParameterError("band window must be odd and >= 1, got " + std::to_string(k));
  }
  KeyPattern p(Kind::kBand);
  p.grid_ = grid;
  p.radius_ = (k - 1) / 2;
  return p;
}

KeyPattern KeyPattern::row_gated(std::vector<std::uint8_t> active) {
  KeyPattern p(Kind::kRowGated);
  p.active_ = std::move(active);
  return p;
}

std::size_t KeyPattern::pairs(std::size_t rows, std::size_t keys) const {
  switch (kind_) {
    case Kind::kFull: return rows * keys;
    case Kind::kDiagonal: return rows;
    case Kind::kBand: return band_pair_count(grid_, radius_);
    case Kind::kRowGated: {
      std::size_t n = 0;
      for (auto a : active_) n += a ? 1 : 0;
      return n * keys;
    }
  }
  return 0;
}

void KeyPattern::check_block(std::size_t rows, std::size_t keys) const {
  switch (kind_) {
    case Kind::kFull: return;
    case Kind::kDiagonal:
      if (rows != keys) {
        throw AlignmentError("position-aligned block needs congruent grids: " +
                             std::to_string(rows) + " queries vs " +
                             std::to_string(keys) + " condition tokens");
      }
      return;
    case Kind::kBand:
      if (rows != grid_.size() || keys != grid_.size()) {
        throw AlignmentError("band block expects " + std::to_string(grid_.size()) +
                             " queries and keys");
      }
      return;
    case Kind::kRowGated:
      if (active_.size() != rows) {
        throw ParameterError("keyword mask length " + std::to_string(active_.size()) +
                             " != query rows " + std::to_string(rows));
      }
      return;
  }
}

template <typename T>
PartialAttention<T> block_partial(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                  const BasicTensor<T>& v, const KeyPattern& pattern,
                                  KernelTally* tally) {
  detail::require_matrix(q, "block_partial");
  detail::require_matrix(k, "block_partial");
  detail::require_matrix(v, "block_partial");
  if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw ContractViolation("block shapes disagree: q " + shape_string(q.shape()) +
                            ", k " + shape_string(k.shape()) + ", v " +
                            shape_string(v.shape()));
  }
  const std::size_t rows = q.dim(0), keys = k.dim(0), d = q.dim(1), dv = v.dim(1);
  pattern.check_block(rows, keys);
  const T scale = T{1} / std::sqrt(static_cast<T>(d));

  auto part = PartialAttention<T>::empty(rows, dv);
  std::vector<T> scores(pattern.pairs(rows, keys));
  if (tally) {
    tally->pairs += scores.size();
    tally->allocated_entries = std::max(tally->allocated_entries, scores.size());
  }

  std::size_t cursor = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    const T* qi = q.raw() + i * d;
    const std::size_t begin = cursor;
    T peak = -std::numeric_limits<T>::infinity();
    pattern.for_each_key(i, keys, [&](std::size_t j) {
      const T* kj = k.raw() + j * d;
      T s{0};
      for (std::size_t p = 0; p < d; ++p) s += qi[p] * kj[p];
      s *= scale;
      scores[cursor++] = s;
      peak = std::max(peak, s);
    });
    if (cursor == begin) continue;

    T* num = part.numerator.raw() + i * dv;
    T total{0};
    std::size_t idx = begin;
    pattern.for_each_key(i, keys, [&](std::size_t j) {
      const T e = std::exp(scores[idx++] - peak);
      total += e;
      const T* vj = v.raw() + j * dv;
      for (std::size_t p = 0; p < dv; ++p) num[p] += e * vj[p];
    });
    part.running_max[i] = peak;
    part.denominator[i] = total;
    part.key_count[i] = cursor - begin;
  }
  return part;
}

template <typename T>
PartialAttention<T> paa(const BasicTensor<T>& qx, const BasicTensor<T>& k_sp,
                        const BasicTensor<T>& v_sp, KernelTally* tally) {
  if (qx.rank() != 2 || k_sp.rank() != 2 || qx.dim(0) != k_sp.dim(0)) {
    throw AlignmentError("position-aligned attention needs one condition token per "
                         "image token: " + shape_string(qx.shape()) + " vs " +
                         shape_string(k_sp.shape()));
  }
  return block_partial(qx, k_sp, v_sp, KeyPattern::diagonal(), tally);
}

template <typename T>
PartialAttention<T> ksa(const BasicTensor<T>& qx, const BasicTensor<T>& k_sj,
                        const BasicTensor<T>& v_sj, const KeywordMask& mask,
                        KernelTally* tally) {
  return block_partial(qx, k_sj, v_sj, KeyPattern::row_gated(mask.active), tally);
}

template <typename T>
PartialAttention<T> merge(const PartialAttention<T>& a, const PartialAttention<T>& b) {
  if (a.rows != b.rows || a.dim != b.dim) {
    throw ContractViolation("cannot merge partials over different rows or widths");
  }
  auto out = PartialAttention<T>::empty(a.rows, a.dim);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const bool has_a = a.key_count[i] > 0, has_b = b.key_count[i] > 0;
    out.key_count[i] = a.key_count[i] + b.key_count[i];
    if (!has_a && !has_b) continue;
    const T peak = std::max(a.running_max[i], b.running_max[i]);
    const T wa = has_a ? std::exp(a.running_max[i] - peak) : T{0};
    const T wb = has_b ? std::exp(b.running_max[i] - peak) : T{0};
    out.running_max[i] = peak;
    out.denominator[i] = wa * a.denominator[i] + wb * b.denominator[i];
    const T* na = a.numerator.raw() + i * a.dim;
    const T* nb = b.numerator.raw() + i * a.dim;
    T* no = out.numerator.raw() + i * a.dim;
    for (std::size_t p = 0; p < a.dim; ++p) no[p] = wa * na[p] + wb * nb[p];
  }
  return out;
}

template <typename T>
BasicTensor<T> finalize(const PartialAttention<T>& p) {
  auto out = BasicTensor<T>::matrix(p.rows, p.dim);
  for (std::size_t i = 0; i < p.rows; ++i) {
    if (p.key_count[i] == 0) {
      throw ContractViolation("query row " + std::to_string(i) +
                              " has no permitted key after merging");
    }
    const T inv = T{1} / p.denominator[i];
    for (std::size_t c = 0; c < p.dim; ++c) out(i, c) = p.numerator(i, c) * inv;
  }
  return out;
}

template <typename T>
BasicTensor<T> merge_partials(const std::vector<PartialAttention<T>>& parts) {
  if (parts.empty()) throw ContractViolation("merge_partials needs at least one partial");
  PartialAttention<T> acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = merge(acc, parts[i]);
  return finalize(acc);
}

template <typename T>
std::vector<T> keyword_scores(const BasicTensor<T>& qx, const BasicTensor<T>& k_text,
                              std::size_t heads, const std::vector<std::size_t>& keywords,
                              ScoreNormalization mode) {
  if (keywords.empty()) throw ParameterError("keyword set must be non-empty");
  if (heads == 0 || qx.dim(1) != k_text.dim(1) || qx.dim(1) % heads != 0) {
    throw ContractViolation("keyword_scores: incompatible query/key widths");
  }
  const std::size_t n = qx.dim(0), d = qx.dim(1) / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(d));
  std::vector<T> logits(n, T{0});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const T* qi = qx.raw() + i * qx.dim(1) + h * d;
      T acc{0};
      for (auto kw : keywords) {
        if (kw >= k_text.dim(0)) throw ParameterError("keyword index outside text");
        const T* kj = k_text.raw() + kw * k_text.dim(1) + h * d;
        for (std::size_t p = 0; p < d; ++p) acc += qi[p] * kj[p];
      }
      logits[i] += acc * scale;
    }
  }
  for (auto& l : logits) l /= static_cast<T>(heads);

  const T peak = *std::max_element(logits.begin(), logits.end());
  T total{0};
  for (auto& l : logits) {
    l = std::exp(l - peak);
    total += l;
  }
  if (mode == ScoreNormalization::kSoftmax) {
    for (auto& l : logits) l /= total;
  }
  return logits;
}

template <typename T>
KeywordMask ksa_mask(const BasicTensor<T>& qx, const BasicTensor<T>& k_text,
                     std::size_t heads, const std::vector<std::size_t>& keywords,
                     double epsilon, ScoreNormalization mode, int step) {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) {
    throw ParameterError("keyword threshold must lie in [0, 1)");
  }
  const auto scores = keyword_scores(qx, k_text, heads, keywords, mode);
  KeywordMask mask;
  mask.step = step;
  mask.epsilon = epsilon;
  mask.mode = mode;
  mask.active.resize(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    mask.active[i] = static_cast<double>(scores[i]) >= epsilon ? 1 : 0;
  }
  if (mask.active_count() == 0) {
    throw DegenerateMaskError("no image token reaches keyword threshold " +
                              std::to_string(epsilon));
  }
  return mask;
}

template <typename T>
KeywordMask ksa_mask_or_fallback(const BasicTensor<T>& qx, const BasicTensor<T>& k_text,
                                 std::size_t heads,
                                 const std::vector<std::size_t>& keywords,
                                 double epsilon, ScoreNormalization mode, int step) {
  try {
    return ksa_mask(qx, k_text, heads, keywords, epsilon, mode, step);
  } catch (const DegenerateMaskError&) {
    auto mask = KeywordMask::all_active(qx.dim(0), step);
    mask.epsilon = epsilon;
    mask.mode = mode;
    mask.fell_back = true;
    return mask;
  }
}

KeyPattern pattern_for(const AttentionMaskSpec& spec, std::size_t qs, std::size_t ks) {
  const auto& r = spec.rule(qs, ks);
  switch (r.kind) {
    case BlockRuleKind::kAll: return KeyPattern::full();
    case BlockRuleKind::kDiagonal: return KeyPattern::diagonal();
    case BlockRuleKind::kBand: return KeyPattern::band(spec.layout().grid(), r.band_k);
    case BlockRuleKind::kRowGated:
      return KeyPattern::row_gated(spec.keyword_mask()->active);
    case BlockRuleKind::kNone: break;
  }
  throw ContractViolation("no pattern for an empty block");
}

template <typename T>
std::vector<std::pair<std::string, PartialAttention<T>>> segment_partials(
    const AttentionInputs<T>& inputs, const AttentionMaskSpec& spec, std::size_t head,
    std::size_t query_segment, CostCounters* counters) {
  const std::size_t d = inputs.head_dim();
  const auto& segs = spec.layout().segments();
  const auto& qseg = segs.at(query_segment);
  const auto qh = slice_rows(slice_cols(inputs.q, head * d, d), qseg.offset, qseg.length);
  const auto kh = slice_cols(inputs.k, head * d, d);
  const auto vh = slice_cols(inputs.v, head * d, d);

  std::vector<std::pair<std::string, PartialAttention<T>>> parts;
  for (std::size_t ks = 0; ks < segs.size(); ++ks) {
    if (spec.rule(query_segment, ks).kind == BlockRuleKind::kNone) continue;
    const auto& kseg = segs[ks];
    KernelTally tally;
    auto part = block_partial(qh, slice_rows(kh, kseg.offset, kseg.length),
                              slice_rows(vh, kseg.offset, kseg.length),
                              pattern_for(spec, query_segment, ks), &tally);
    if (counters) {
      counters->record(qseg.name(), kseg.name(), tally.pairs, tally.allocated_entries);
    }
    parts.emplace_back(kseg.name(), std::move(part));
  }
  return parts;
}

template <typename T>
BasicTensor<T> pka_attention(const AttentionInputs<T>& inputs,
                             const AttentionMaskSpec& spec, CostCounters* counters,
                             EngineOptions options) {
  inputs.validate();
  if (spec.layout().total_length() != inputs.length()) {
    throw ContractViolation("mask covers " + std::to_string(spec.layout().total_length()) +
                            " tokens but inputs have " + std::to_string(inputs.length()));
  }
  const std::size_t d = inputs.head_dim();
  const auto& segs = spec.layout().segments();
  auto out = BasicTensor<T>::matrix(inputs.length(), inputs.q.dim(1));
  for (std::size_t h = 0; h < inputs.heads; ++h) {
    for (std::size_t qs = 0; qs < segs.size(); ++qs) {
      if (options.skip_condition_rows && segs[qs].is_condition()) continue;
      auto labelled = segment_partials(inputs, spec, h, qs, counters);
      if (labelled.empty()) {
        throw ContractViolation("segment " + segs[qs].name() + " has no key blocks");
      }
      PartialAttention<T> acc = std::move(labelled.front().second);
      for (std::size_t b = 1; b < labelled.size(); ++b) acc = merge(acc, labelled[b].second);
      const auto rows = finalize(acc);
      for (std::size_t i = 0; i < rows.dim(0); ++i) {
        std::copy_n(rows.raw() + i * d, d,
                    out.raw() + (segs[qs].offset + i) * out.dim(1) + h * d);
      }
    }
  }
  return out;
}

#define PKA_INSTANTIATE(T)                                                        \
  template struct PartialAttention<T>;                                            \
  template PartialAttention<T> block_partial(const BasicTensor<T>&,               \
                                             const BasicTensor<T>&,               \
                                             const BasicTensor<T>&,               \
                                             const KeyPattern&, KernelTally*);    \
  template PartialAttention<T> paa(const BasicTensor<T>&, const BasicTensor<T>&,  \
                                   const BasicTensor<T>&, KernelTally*);          \
  template PartialAttention<T> ksa(const BasicTensor<T>&, const BasicTensor<T>&,  \
                                   const BasicTensor<T>&, const KeywordMask&,     \
                                   KernelTally*);                                 \
  template PartialAttention<T> merge(const PartialAttention<T>&,                  \
                                     const PartialAttention<T>&);                 \
  template BasicTensor<T> finalize(const PartialAttention<T>&);                   \
  template BasicTensor<T> merge_partials(const std::vector<PartialAttention<T>>&); \
  template std::vector<T> keyword_scores(const BasicTensor<T>&,                   \
                                         const BasicTensor<T>&, std::size_t,      \
                                         const std::vector<std::size_t>&,         \
                                         ScoreNormalization);                     \
  template KeywordMask ksa_mask(const BasicTensor<T>&, const BasicTensor<T>&,     \
                                std::size_t, const std::vector<std::size_t>&,     \
                                double, ScoreNormalization, int);                 \
  template KeywordMask ksa_mask_or_fallback(                                      \
      const BasicTensor<T>&, const BasicTensor<T>&, std::size_t,                  \
      const std::vector<std::size_t>&, double, ScoreNormalization, int);          \
  template std::vector<std::pair<std::string, PartialAttention<T>>>               \
  segment_partials(const AttentionInputs<T>&, const AttentionMaskSpec&,           \
                   std::size_t, std::size_t, CostCounters*);                      \
  template BasicTensor<T> pka_attention(const AttentionInputs<T>&,                \
                                        const AttentionMaskSpec&, CostCounters*,  \
                                        EngineOptions);

PKA_INSTANTIATE(float)
PKA_INSTANTIATE(double)

#undef PKA_INSTANTIATE

}  // namespace pka
