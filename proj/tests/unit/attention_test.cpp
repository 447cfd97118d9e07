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

#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "pka/attention_dense.hpp"
#include "pka/attention_sparse.hpp"
#include "pka/layout.hpp"
#include "test_support.hpp"

using namespace pka;
using pka::testing::random64;

namespace {

template <typename T>
AttentionInputs<T> random_inputs(Rng& rng, std::size_t L, std::size_t heads, std::size_t d) {
  AttentionInputs<T> in;
  in.q = random_normal<T>(rng, Shape{L, heads * d});
  in.k = random_normal<T>(rng, Shape{L, heads * d});
  in.v = random_normal<T>(rng, Shape{L, heads * d});
  in.heads = heads;
  return in;
}

GridShape square_grid(std::size_t n) {
  const auto s = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
  return {s, s};
}

KeywordMask random_mask(Rng& rng, std::size_t n, double fraction) {
  KeywordMask m;
  m.active.resize(n);
  for (auto& a : m.active) a = rng.uniform() < fraction ? 1 : 0;
  return m;
}

template <typename T>
double engine_vs_oracle(const AttentionInputs<T>& in, const AttentionMaskSpec& spec) {
  return static_cast<double>(max_abs_diff(pka_attention(in, spec), masked_attention_oracle(in, spec)));
}

}  // namespace

TEST_CASE("mma_full: single key returns the value row") {
  AttentionInputs<double> in;
  in.q = Tensor64::matrix(1, 3, {0.3, -1, 2});
  in.k = Tensor64::matrix(1, 3, {5, 5, 5});
  in.v = Tensor64::matrix(1, 3, {1.5, -2, 4});
  CHECK(mma_full(in) == in.v);
}

TEST_CASE("mma_full: identical keys average the values") {
  Rng rng(5);
  AttentionInputs<double> in;
  in.q = random64(rng, 6, 4);
  in.k = Tensor64::matrix(6, 4);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t c = 0; c < 4; ++c) in.k(i, c) = 0.25 * static_cast<double>(c);
  }
  in.v = random64(rng, 6, 4);
  const auto out = mma_full(in);
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0;
    for (std::size_t j = 0; j < 6; ++j) mean += in.v(j, c) / 6.0;
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(out(i, c) - mean) <= 1e-12);
  }
}

TEST_CASE("mma_full: matches a two-loop oracle, L=12 d=4") {
  Rng rng(12);
  auto in = random_inputs<double>(rng, 12, 1, 4);
  const auto expect =
      testing::two_loop_attention(in.q, in.k, in.v, [](std::size_t, std::size_t) { return true; });
  CHECK(max_abs_diff(mma_full(in), expect) <= 1e-6);

  // Two heads: each half of the width is an independent attention.
  auto in2 = random_inputs<double>(rng, 12, 2, 4);
  const auto out2 = mma_full(in2);
  for (std::size_t h = 0; h < 2; ++h) {
    const auto ref = testing::two_loop_attention(
        slice_cols(in2.q, 4 * h, 4), slice_cols(in2.k, 4 * h, 4), slice_cols(in2.v, 4 * h, 4),
        [](std::size_t, std::size_t) { return true; });
    CHECK(max_abs_diff(slice_cols(out2, 4 * h, 4), ref) <= 1e-6);
  }
}

TEST_CASE("masked oracle: dense spec reproduces mma_full; pka matches two-loop") {
  Rng rng(8);
  const ModalityLayout layout(2, {2, 2}, 1, {3}, {0});
  auto in = random_inputs<double>(rng, layout.total_length(), 1, 4);
  CHECK(max_abs_diff(masked_attention_oracle(in, build_mask(layout, MaskMode::kDenseFull)),
                     mma_full(in)) <= 1e-14);
  auto fin = random_inputs<float>(rng, layout.total_length(), 2, 4);
  CHECK(max_abs_diff(masked_attention_oracle(fin, build_mask(layout, MaskMode::kDenseFull)),
                     mma_full(fin)) <= 1e-6f);

  KeywordMask km;
  km.active = {0, 1, 1, 0};
  const auto spec = build_mask(layout, MaskMode::kPka, 1, km);
  const auto expect = testing::two_loop_attention(
      in.q, in.k, in.v, [&](std::size_t i, std::size_t j) { return spec.permits(i, j); });
  CHECK(max_abs_diff(masked_attention_oracle(in, spec), expect) <= 1e-12);
}

TEST_CASE("masked oracle: probabilities are zero outside the mask and rows sum to 1") {
  Rng rng(81);
  const ModalityLayout layout(3, {3, 3}, 2, {2}, {1});
  const auto spec = build_mask(layout, MaskMode::kBand, 3, random_mask(rng, 9, 0.5));
  for (auto method : {MaskingMethod::kExactExclusion, MaskingMethod::kSentinel}) {
    auto in = random_inputs<double>(rng, layout.total_length(), 2, 3);
    std::vector<Tensor64> probs;
    masked_attention_oracle(in, spec, method, &probs);
    REQUIRE(probs.size() == 2);
    for (const auto& p : probs) {
      for (std::size_t i = 0; i < p.rows(); ++i) {
        double total = 0;
        for (std::size_t j = 0; j < p.cols(); ++j) {
          if (!spec.permits(i, j)) REQUIRE(p(i, j) == 0.0);
          total += p(i, j);
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("paa: finalized alone copies V_SP") {
  // One permitted key per row: weight 1 in both the kernel and the two-loop
  // reference.
  Rng rng(3);
  const auto qx = random64(rng, 9, 4), ksp = random64(rng, 9, 4), vsp = random64(rng, 9, 4);
  const auto out = finalize(paa(qx, ksp, vsp));
  CHECK(max_abs_diff(out, vsp) <= 1e-15);
  const auto exp = testing::two_loop_attention(
      qx, ksp, vsp, [](std::size_t i, std::size_t j) { return i == j; });
  CHECK(max_abs_diff(exp, vsp) <= 1e-15);
}

TEST_CASE("paa: alignment is required and storage is linear") {
  Rng rng(4);
  const auto qx = random64(rng, 16, 4), k = random64(rng, 9, 4);
  CHECK_THROWS_AS(paa(qx, k, k), AlignmentError);

  for (std::size_t n : {4, 16, 64, 256}) {
    const auto q = random64(rng, n, 4), kk = random64(rng, n, 4), v = random64(rng, n, 4);
    KernelTally tally;
    const auto part = paa(q, kk, v, &tally);
    CHECK(tally.pairs == n);
    CHECK(tally.allocated_entries == n);
    for (auto c : part.key_count) CHECK(c == 1);
  }
}

TEST_CASE("sparse engine: seeded M=4 N=9 c=1 s=1 instance matches the oracle") {
  const ModalityLayout layout(4, {3, 3}, 1, {5}, {2});
  for (int pass = 0; pass < 2; ++pass) {
    std::optional<KeywordMask> km;
    if (pass == 1) km = KeywordMask{{1, 0, 1, 1, 0, 0, 1, 0, 0}};
    const auto spec = build_mask(layout, MaskMode::kPka, 1, km);
    Rng r32(77), r64(77);
    CHECK(engine_vs_oracle(random_inputs<float>(r32, layout.total_length(), 2, 4), spec) <= 1e-5);
    CHECK(engine_vs_oracle(random_inputs<double>(r64, layout.total_length(), 2, 4), spec) <= 1e-10);
  }
}

TEST_CASE("sparse engine: two spatial conditions give two condition logits per X row") {
  const ModalityLayout layout(2, {2, 2}, 2, {}, {0});
  const auto spec = build_mask(layout, MaskMode::kPka);
  Rng rng(19);
  const auto in = random_inputs<double>(rng, layout.total_length(), 1, 4);
  const auto parts = segment_partials(in, spec, 0, 1);
  std::size_t cond_blocks = 0;
  for (const auto& [label, p] : parts) {
    if (label.rfind("SP", 0) == 0) {
      ++cond_blocks;
      for (auto c : p.key_count) CHECK(c == 1);
    }
  }
  CHECK(cond_blocks == 2);
  CHECK(engine_vs_oracle(in, spec) <= 1e-12);
}

TEST_CASE("ksa: all-active equals a dense block; all-inactive drops the subject") {
  Rng rng(21);
  const auto qx = random64(rng, 9, 4), k = random64(rng, 5, 4), v = random64(rng, 5, 4);
  const auto a = finalize(ksa(qx, k, v, KeywordMask::all_active(9)));
  const auto b = finalize(block_partial(qx, k, v, KeyPattern::full()));
  CHECK(max_abs_diff(a, b) <= 1e-15);

  KeywordMask none;
  none.active.assign(9, 0);
  KernelTally tally;
  const auto p = ksa(qx, k, v, none, &tally);
  CHECK(tally.pairs == 0);
  for (auto c : p.key_count) CHECK(c == 0);
  CHECK_THROWS_AS(finalize(p), ContractViolation);

  // In a full sequence the gated-off subject equals the oracle with that
  // block removed, i.e. the same layout without the subject.
  const ModalityLayout with(2, {3, 3}, 0, {5}, {0});
  const ModalityLayout without(2, {3, 3}, 0, {}, {0});
  auto in = random_inputs<double>(rng, with.total_length(), 1, 4);
  const auto gated = pka_attention(in, build_mask(with, MaskMode::kPka, 1, none));
  AttentionInputs<double> cut{slice_rows(in.q, 0, without.total_length()),
                              slice_rows(in.k, 0, without.total_length()),
                              slice_rows(in.v, 0, without.total_length()), 1};
  const auto ref = masked_attention_oracle(cut, build_mask(without, MaskMode::kPka));
  const auto& X = with.image();
  CHECK(max_abs_diff(slice_rows(gated, X.offset, X.length), slice_rows(ref, X.offset, X.length)) <=
        1e-12);
}

TEST_CASE("ksa: 40% active matches the row-gated oracle in fp32") {
  const ModalityLayout layout(4, {4, 4}, 1, {6}, {1});
  Rng rng(40);
  auto km = random_mask(rng, 16, 0.4);
  const auto spec = build_mask(layout, MaskMode::kPka, 1, km);
  CHECK(engine_vs_oracle(random_inputs<float>(rng, layout.total_length(), 4, 4), spec) <= 1e-5);
}

TEST_CASE("merge: empty partial is the identity; order does not matter") {
  Rng rng(2);
  const auto q = random_inputs<float>(rng, 6, 1, 4).q;
  std::vector<PartialAttention<float>> parts;
  for (std::size_t n : {3, 7, 2}) {
    const auto k = random_normal<float>(rng, Shape{n, 4}, 2.0);
    const auto v = random_normal<float>(rng, Shape{n, 4});
    parts.push_back(block_partial(q, k, v, KeyPattern::full()));
  }
  const auto empty = PartialAttention<float>::empty(6, 4);
  CHECK(max_abs_diff(finalize(merge(parts[0], empty)), finalize(parts[0])) == 0.0f);
  CHECK(max_abs_diff(finalize(merge(empty, parts[0])), finalize(parts[0])) == 0.0f);

  std::vector<std::size_t> order{0, 1, 2};
  const auto ref = merge_partials(parts);
  do {
    std::vector<PartialAttention<float>> permuted;
    for (auto i : order) permuted.push_back(parts[i]);
    CHECK(max_abs_diff(merge_partials(permuted), ref) <= 1e-6f);
  } while (std::next_permutation(order.begin(), order.end()));
  CHECK(max_abs_diff(finalize(merge(merge(parts[0], parts[1]), parts[2])),
                     finalize(merge(parts[0], merge(parts[1], parts[2])))) <= 1e-6f);
}

TEST_CASE("merge: large logits stay finite") {
  auto q = Tensor64::matrix(1, 1, {1.0});
  auto k1 = Tensor64::matrix(1, 1, {900.0}), k2 = Tensor64::matrix(1, 1, {-900.0});
  auto v1 = Tensor64::matrix(1, 1, {2.0}), v2 = Tensor64::matrix(1, 1, {5.0});
  const auto out = merge_partials<double>(
      {block_partial(q, k1, v1, KeyPattern::full()), block_partial(q, k2, v2, KeyPattern::full())});
  CHECK(out[0] == doctest::Approx(2.0));
}

TEST_CASE("ksa_mask: documented examples") {
  // One head, d = 1, keyword key = 1, so logits equal the query values.
  const auto k_text = Tensor64::matrix(2, 1, {0.0, 1.0});
  const std::vector<std::size_t> kw{1};

  const auto q = Tensor64::matrix(4, 1, {10, 0, 0, 0});
  const auto m = ksa_mask(q, k_text, 1, kw, 0.2, ScoreNormalization::kSoftmax, 3);
  CHECK(m.active == std::vector<std::uint8_t>{1, 0, 0, 0});
  CHECK(m.step == 3);
  const auto s = keyword_scores(q, k_text, 1, kw, ScoreNormalization::kSoftmax);
  CHECK(std::abs(s[0] - 0.99986381876) <= 1e-10);
  CHECK(std::abs(s[1] - 4.5393747144e-05) <= 1e-14);

  const auto zeros = ksa_mask(q, k_text, 1, kw, 0.0, ScoreNormalization::kSoftmax, 0);
  CHECK(zeros.active_count() == 4);

  const auto u4 = Tensor64::matrix(4, 1);
  CHECK(ksa_mask(u4, k_text, 1, kw, 0.2, ScoreNormalization::kSoftmax, 0).active_count() == 4);
  const auto u16 = Tensor64::matrix(16, 1);
  CHECK_THROWS_AS(ksa_mask(u16, k_text, 1, kw, 0.2, ScoreNormalization::kSoftmax, 0),
                  DegenerateMaskError);
  const auto fb = ksa_mask_or_fallback(u16, k_text, 1, kw, 0.2, ScoreNormalization::kSoftmax, 5);
  CHECK(fb.fell_back);
  CHECK(fb.active_count() == 16);
  CHECK(fb.step == 5);
  // Relative-to-max does not depend on the token count.
  CHECK(ksa_mask(u16, k_text, 1, kw, 0.2, ScoreNormalization::kRelativeToMax, 0).active_count() ==
        16);

  CHECK_THROWS_AS(ksa_mask(q, k_text, 1, {}, 0.2, ScoreNormalization::kSoftmax, 0), ParameterError);
  CHECK_THROWS_AS(ksa_mask(q, k_text, 1, kw, 1.0, ScoreNormalization::kSoftmax, 0), ParameterError);
}

TEST_CASE("ksa_mask: logits sum over keywords and average over heads") {
  // Two heads of width 1; head 0 logits q, head 1 logits -q/2 for keyword 0
  // plus keyword 1 contributing a constant shift.
  const auto k_text = Tensor64::matrix(2, 2, {1.0, -0.5, 0.0, 0.0});
  const auto q = Tensor64::matrix(3, 2, {2, 2, 0, 0, -2, -2});
  const auto s = keyword_scores(q, k_text, 2, {0, 1}, ScoreNormalization::kRelativeToMax);
  // averaged logits: (2 - 1)/2 = 0.5, 0, -0.5 -> relative = exp(l - 0.5)
  CHECK(std::abs(s[0] - 1.0) <= 1e-15);
  CHECK(std::abs(s[1] - std::exp(-0.5)) <= 1e-15);
  CHECK(std::abs(s[2] - std::exp(-1.0)) <= 1e-15);
}

TEST_CASE("sparse engine: fallback mask never leaves a query row empty") {
  for (std::size_t n : {1, 4, 9}) {
    const ModalityLayout layout(1, square_grid(n), 1, {1, 2}, {0});
    KeywordMask fb = KeywordMask::all_active(n);
    fb.fell_back = true;
    KeywordMask none;
    none.active.assign(n, 0);
    for (const auto& km : {fb, none}) {
      const auto spec = build_mask(layout, MaskMode::kPka, 1, km);
      for (std::size_t q = 0; q < layout.total_length(); ++q) {
        CHECK_FALSE(permitted_keys(spec, q).empty());
      }
      Rng rng(n);
      const auto in = random_inputs<double>(rng, layout.total_length(), 1, 2);
      CHECK(all_finite(pka_attention(in, spec)));
    }
  }
}

TEST_CASE("sparse engine: 200 seeded instances agree with the oracle") {
  Rng meta(2025);
  const std::size_t Ms[] = {2, 8}, Ns[] = {4, 16, 64}, hs[] = {1, 4}, ds[] = {4, 16};
  double worst32 = 0, worst64 = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t M = Ms[meta.below(2)], N = Ns[meta.below(3)];
    const std::size_t c = meta.below(4), s = meta.below(3);
    const std::size_t h = hs[meta.below(2)], d = ds[meta.below(2)];
    std::vector<std::size_t> subjects(s);
    for (auto& n : subjects) n = 1 + meta.below(8);
    const ModalityLayout layout(M, square_grid(N), c, subjects, {meta.below(M)});

    const auto mode = meta.below(3) == 0 ? MaskMode::kBand : MaskMode::kPka;
    const std::size_t band_k = 1 + 2 * meta.below(3);
    std::optional<KeywordMask> km;
    if (meta.below(2)) km = random_mask(meta, N, meta.uniform());
    const auto spec = build_mask(layout, mode, band_k, km);

    const std::uint64_t seed = meta.next_u64();
    Rng r32(seed), r64(seed);
    worst32 = std::max(worst32, engine_vs_oracle(random_inputs<float>(r32, layout.total_length(), h, d), spec));
    worst64 = std::max(worst64, engine_vs_oracle(random_inputs<double>(r64, layout.total_length(), h, d), spec));
  }
  CHECK(worst32 <= 1e-5);
  CHECK(worst64 <= 1e-10);
}

TEST_CASE("sparse engine: permuting condition keys with the mask leaves output unchanged") {
  // Swap two subject tokens (rows of K and V together); X->SJ is full so the
  // permuted mask is the same mask.
  const ModalityLayout layout(2, {2, 2}, 1, {4}, {0});
  const auto spec = build_mask(layout, MaskMode::kPka, 1, KeywordMask{{1, 0, 1, 1}});
  Rng rng(99);
  auto in = random_inputs<double>(rng, layout.total_length(), 2, 4);
  const auto base = pka_attention(in, spec);
  auto swapped = in;
  const auto& sj = layout.subject(0);
  const std::size_t a = sj.offset, b = sj.offset + 3;
  for (std::size_t c = 0; c < in.k.cols(); ++c) {
    std::swap(swapped.k(a, c), swapped.k(b, c));
    std::swap(swapped.v(a, c), swapped.v(b, c));
    std::swap(swapped.q(a, c), swapped.q(b, c));
  }
  auto out = pka_attention(swapped, spec);
  // Query rows a and b swapped too, so swap them back before comparing.
  for (std::size_t c = 0; c < out.cols(); ++c) std::swap(out(a, c), out(b, c));
  CHECK(max_abs_diff(out, base) <= 1e-12);
}

TEST_CASE("sparse engine: counters and skipped condition rows") {
  const ModalityLayout layout(8, {8, 8}, 1, {}, {0});
  const auto spec = build_mask(layout, MaskMode::kPka);
  Rng rng(6);
  const auto in = random_inputs<float>(rng, layout.total_length(), 2, 4);
  CostCounters counters;
  pka_attention(in, spec, &counters);
  CHECK(counters.total_pairs() == 2 * 9344);
  CHECK(counters.blocks().at({"X", "SP0"}).pairs == 2 * 64);
  CHECK(counters.peak_entries() <= 64 * 64);

  CostCounters dense;
  mma_full(in, &dense);
  CHECK(dense.total_pairs() == 2 * 18496);
  CHECK(dense.peak_entries() == 136 * 136);

  CostCounters cached;
  const auto out = pka_attention(in, spec, &cached, EngineOptions{true});
  CHECK(cached.total_pairs() == 2 * (9344 - 64 * 64));
  const auto& sp = layout.spatial(0);
  for (std::size_t i = sp.offset; i < sp.offset + sp.length; ++i) {
    for (std::size_t c = 0; c < out.cols(); ++c) REQUIRE(out(i, c) == 0.0f);
  }
}
