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

#include <set>

#include "doctest.h"
#include "pka/layout.hpp"
#include "pka/rng.hpp"

using namespace pka;

namespace {

ModalityLayout make(std::size_t M, GridShape grid, std::size_t c,
                    std::vector<std::size_t> subjects = {}) {
  return ModalityLayout(M, grid, c, std::move(subjects), {0});
}

std::size_t enumerate_pairs(const AttentionMaskSpec& spec) {
  std::size_t n = 0;
  const auto L = spec.layout().total_length();
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < L; ++j) n += spec.permits(i, j) ? 1 : 0;
  }
  return n;
}

}  // namespace

TEST_CASE("layout: segments are ordered, disjoint and cover the sequence") {
  const ModalityLayout layout(3, {2, 3}, 2, {4, 1}, {1, 2});
  CHECK(layout.total_length() == 3 + 6 + 2 * 6 + 4 + 1);
  std::size_t expect = 0;
  for (const auto& s : layout.segments()) {
    CHECK(s.offset == expect);
    expect += s.length;
  }
  CHECK(expect == layout.total_length());
  CHECK(layout.spatial(1).name() == "SP1");
  CHECK(layout.subject(0).name() == "SJ0");
  CHECK(layout.segment_index_of(layout.subject(1).offset) == 5);
}

TEST_CASE("layout: misaligned spatial grids and bad keywords are rejected") {
  CHECK_THROWS_AS(ModalityLayout(2, {2, 2}, 1, {}, {0}, {GridShape{2, 3}}), AlignmentError);
  CHECK_THROWS_AS(ModalityLayout(2, {2, 2}, 1, {}, {}), ParameterError);
  CHECK_THROWS_AS(ModalityLayout(2, {2, 2}, 1, {}, {2}), ParameterError);
}

TEST_CASE("build_mask: pka X->SP is exactly the diagonal") {
  const auto layout = make(2, {2, 2}, 1);
  const auto spec = build_mask(layout, MaskMode::kPka);
  const auto& X = layout.image();
  const auto& SP = layout.spatial(0);
  std::set<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < X.length; ++i) {
    for (std::size_t j = 0; j < SP.length; ++j) {
      if (spec.permits(X.offset + i, SP.offset + j)) pairs.insert({i, j});
    }
  }
  CHECK(pairs == std::set<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}, {2, 2}, {3, 3}});
  CHECK(spec.block_pairs(1, 2) == 4);
}

TEST_CASE("build_mask: pka block rules") {
  const ModalityLayout layout(2, {2, 2}, 1, {3}, {1});
  const auto spec = build_mask(layout, MaskMode::kPka);
  // segments: T X SP0 SJ0
  CHECK(spec.rule(0, 0).kind == BlockRuleKind::kAll);
  CHECK(spec.rule(0, 1).kind == BlockRuleKind::kAll);
  CHECK(spec.rule(0, 2).kind == BlockRuleKind::kNone);
  CHECK(spec.rule(0, 3).kind == BlockRuleKind::kNone);
  CHECK(spec.rule(1, 2).kind == BlockRuleKind::kDiagonal);
  CHECK(spec.rule(1, 3).kind == BlockRuleKind::kAll);  // no mask yet: dense X->SJ
  CHECK(spec.rule(2, 2).kind == BlockRuleKind::kAll);
  CHECK(spec.rule(2, 1).kind == BlockRuleKind::kNone);
  CHECK(spec.rule(3, 3).kind == BlockRuleKind::kAll);
  CHECK(spec.rule(3, 0).kind == BlockRuleKind::kNone);

  KeywordMask km;
  km.active = {1, 0, 0, 1};
  const auto gated = build_mask(layout, MaskMode::kPka, 1, km);
  CHECK(gated.rule(1, 3).kind == BlockRuleKind::kRowGated);
  CHECK(gated.block_pairs(1, 3) == 2 * 3);
}

TEST_CASE("build_mask: band windows on a 2x2 grid") {
  const auto layout = make(2, {2, 2}, 1);
  const auto& X = layout.image();
  const auto& SP = layout.spatial(0);
  auto keys_of_origin = [&](std::size_t k) {
    const auto spec = build_mask(layout, MaskMode::kBand, k);
    std::size_t n = 0;
    for (std::size_t j = 0; j < SP.length; ++j) n += spec.permits(X.offset, SP.offset + j);
    return n;
  };
  CHECK(keys_of_origin(1) == 1);
  CHECK(keys_of_origin(3) == 4);  // itself plus 3 in-grid neighbours
  CHECK_THROWS_AS(build_mask(layout, MaskMode::kBand, 2), ParameterError);
  CHECK_THROWS_AS(build_mask(layout, MaskMode::kBand, 0), ParameterError);
}

TEST_CASE("build_mask: keyword gating preconditions") {
  const auto layout = make(2, {2, 2}, 0, {2});
  KeywordMask wrong;
  wrong.active = {1, 1, 1};
  CHECK_THROWS_AS(build_mask(layout, MaskMode::kPka, 1, wrong), ParameterError);
  CHECK_THROWS_AS(build_mask(layout, MaskMode::kDenseFull, 1, KeywordMask::all_active(4)),
                  ParameterError);
}

TEST_CASE("permitted_pairs: documented counts") {
  const auto small = make(2, {2, 2}, 1);
  CHECK(small.total_length() == 10);
  CHECK(permitted_pairs(build_mask(small, MaskMode::kDenseFull)) == 100);

  const auto layout = make(8, {8, 8}, 1);
  CHECK(layout.total_length() == 136);
  CHECK(permitted_pairs(build_mask(layout, MaskMode::kDenseFull)) == 18496);
  // 8*72 (T) + 64*8 (X->T) + 64*64 (X->X) + 64 (X->SP diag) + 64*64 (SP self)
  CHECK(permitted_pairs(build_mask(layout, MaskMode::kPka)) == 9344);
}

TEST_CASE("permitted_pairs: pka affine in c, dense quadratic in c") {
  std::vector<std::size_t> pka, dense;
  for (std::size_t c = 1; c <= 4; ++c) {
    const auto layout = make(8, {8, 8}, c);
    pka.push_back(permitted_pairs(build_mask(layout, MaskMode::kPka)));
    dense.push_back(permitted_pairs(build_mask(layout, MaskMode::kDenseFull)));
  }
  for (std::size_t i = 1; i < pka.size(); ++i) CHECK(pka[i] - pka[i - 1] == 64 + 64 * 64);
  for (std::size_t i = 2; i < pka.size(); ++i) {
    CHECK(pka[i] - 2 * pka[i - 1] + pka[i - 2] == 0);
    CHECK(dense[i] - 2 * dense[i - 1] + dense[i - 2] == 2 * 64 * 64);
  }
}

TEST_CASE("permitted_pairs: closed form equals enumeration on random layouts") {
  Rng rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t M = 1 + rng.below(4);
    const GridShape grid{1 + rng.below(4), 1 + rng.below(4)};
    const std::size_t c = rng.below(3);
    std::vector<std::size_t> subjects(rng.below(3));
    for (auto& s : subjects) s = 1 + rng.below(4);
    const ModalityLayout layout(M, grid, c, subjects, {rng.below(M)});

    std::optional<KeywordMask> km;
    if (rng.below(2)) {
      KeywordMask m;
      m.active.resize(grid.size());
      for (auto& a : m.active) a = static_cast<std::uint8_t>(rng.below(2));
      km = m;
    }
    for (auto mode : {MaskMode::kDenseFull, MaskMode::kPka, MaskMode::kBand}) {
      for (std::size_t k : {1, 3, 5}) {
        const auto spec = build_mask(layout, mode, k,
                                     mode == MaskMode::kDenseFull ? std::nullopt : km);
        REQUIRE(permitted_pairs(spec) == enumerate_pairs(spec));
        // Every query keeps at least one key.
        for (std::size_t q = 0; q < layout.total_length(); ++q) {
          REQUIRE_FALSE(permitted_keys(spec, q).empty());
        }
      }
    }
  }
}

TEST_CASE("band masks: k=1 equals the diagonal, monotone in k, bounded by dense") {
  for (const GridShape grid : {GridShape{3, 3}, GridShape{4, 6}, GridShape{8, 8}}) {
    const auto layout = make(4, grid, 2, {3});
    const auto pka = build_mask(layout, MaskMode::kPka);
    const auto band1 = build_mask(layout, MaskMode::kBand, 1);
    CHECK(permitted_pairs(band1) == permitted_pairs(pka));
    for (std::size_t q = 0; q < layout.total_length(); ++q) {
      REQUIRE(permitted_keys(band1, q) == permitted_keys(pka, q));
    }
    std::size_t previous = 0;
    for (std::size_t k = 1; k <= 17; k += 2) {
      const auto n = permitted_pairs(build_mask(layout, MaskMode::kBand, k));
      CHECK(n >= previous);
      CHECK(n <= permitted_pairs(build_mask(layout, MaskMode::kDenseFull)));
      previous = n;
    }
  }
}

TEST_CASE("mask json: round trip preserves rules and counts") {
  const ModalityLayout layout(3, {2, 3}, 1, {2}, {1});
  KeywordMask km;
  km.active = {1, 0, 1, 0, 0, 1};
  km.step = 4;
  km.epsilon = 0.2;
  const auto spec = build_mask(layout, MaskMode::kBand, 3, km);
  const auto doc = to_json(spec);
  CHECK(doc.at("mode") == "band");
  CHECK(doc.at("permitted_pairs") == permitted_pairs(spec));
  const auto back = mask_from_json(nlohmann::json::parse(doc.dump()));
  CHECK(back.layout() == layout);
  CHECK(permitted_pairs(back) == permitted_pairs(spec));
  CHECK(back.keyword_mask()->active == km.active);
  CHECK(back.keyword_mask()->step == 4);

  CHECK_THROWS_AS(layout_from_json(nlohmann::json{{"grid", {2, 2}}}), FormatError);
}
