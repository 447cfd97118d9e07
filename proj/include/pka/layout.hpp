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

// Token layout of the concatenated sequence [T; X; SP_1..SP_c; SJ_1..SJ_s]
// and the block-structured masks defined over it.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "pka/keyword_mask.hpp"

namespace pka {

struct GridShape {
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const noexcept { return height * width; }
  bool operator==(const GridShape&) const = default;
};

enum class SegmentKind { kText, kImage, kSpatial, kSubject };

struct Segment {
  SegmentKind kind;
  std::size_t index;   // condition index within its kind; 0 for T and X
  std::size_t offset;  // first token in the concatenated sequence
  std::size_t length;

  std::string name() const;
  bool is_condition() const noexcept {
    return kind == SegmentKind::kSpatial || kind == SegmentKind::kSubject;
  }
};

class ModalityLayout {
 public:
  // Throws AlignmentError when a spatial condition grid differs from the
  // image grid and ParameterError for empty/out-of-range keyword sets.
  // `spatial_grids` defaults to `spatial_count` copies of the image grid.
  ModalityLayout(std::size_t text_len, GridShape image_grid,
                 std::size_t spatial_count,
                 std::vector<std::size_t> subject_lengths,
                 std::vector<std::size_t> keywords,
                 std::vector<GridShape> spatial_grids = {});

  std::size_t text_len() const noexcept { return text_len_; }
  const GridShape& grid() const noexcept { return grid_; }
  std::size_t image_tokens() const noexcept { return grid_.size(); }
  std::size_t spatial_count() const noexcept { return spatial_count_; }
  std::size_t subject_count() const noexcept { return subject_lengths_.size(); }
  const std::vector<std::size_t>& subject_lengths() const noexcept {
    return subject_lengths_;
  }
  const std::vector<std::size_t>& keywords() const noexcept { return keywords_; }
  std::size_t total_length() const noexcept { return total_; }

  const std::vector<Segment>& segments() const noexcept { return segments_; }
  const Segment& text() const { return segments_[0]; }
  const Segment& image() const { return segments_[1]; }
  const Segment& spatial(std::size_t j) const;
  const Segment& subject(std::size_t j) const;
  std::size_t segment_index_of(std::size_t token) const;

  bool operator==(const ModalityLayout& other) const;

 private:
  std::size_t text_len_;
  GridShape grid_;
  std::size_t spatial_count_;
  std::vector<std::size_t> subject_lengths_;
  std::vector<std::size_t> keywords_;
  std::size_t total_ = 0;
  std::vector<Segment> segments_;
};

enum class MaskMode { kDenseFull, kPka, kBand };

std::string_view to_string(MaskMode mode);
MaskMode parse_mask_mode(std::string_view name);

enum class BlockRuleKind { kAll, kNone, kDiagonal, kBand, kRowGated };

std::string_view to_string(BlockRuleKind kind);

struct BlockRule {
  BlockRuleKind kind = BlockRuleKind::kNone;
  // Window size for kBand; radius is (k - 1) / 2 in grid Chebyshev distance.
  std::size_t band_k = 1;

  bool operator==(const BlockRule&) const = default;
};

// Declarative block mask: one rule per (query segment, key segment).
class AttentionMaskSpec {
 public:
  AttentionMaskSpec(ModalityLayout layout, MaskMode mode, std::size_t band_k,
                    std::optional<KeywordMask> keyword_mask,
                    std::vector<BlockRule> rules);

  const ModalityLayout& layout() const noexcept { return layout_; }
  MaskMode mode() const noexcept { return mode_; }
  std::size_t band_k() const noexcept { return band_k_; }
  const std::optional<KeywordMask>& keyword_mask() const noexcept {
    return keyword_mask_;
  }
  const BlockRule& rule(std::size_t query_segment, std::size_t key_segment) const;

  // Pointwise membership over sequence positions.
  bool permits(std::size_t query, std::size_t key) const;

  // Pairs permitted inside one block / the whole mask, in closed form.
  std::size_t block_pairs(std::size_t query_segment, std::size_t key_segment) const;

 private:
  ModalityLayout layout_;
  MaskMode mode_;
  std::size_t band_k_;
  std::optional<KeywordMask> keyword_mask_;
  std::vector<BlockRule> rules_;  // row-major segments x segments
};

// pka: T->{T,X} all; X->{T,X} all; X->SP_j diagonal; X->SJ_j row-gated
// (all rows when no keyword mask is supplied); each condition attends only
// to itself. band: as pka with X->SP_j replaced by a k x k grid window.
// dense-full: every pair.
AttentionMaskSpec build_mask(const ModalityLayout& layout, MaskMode mode,
                             std::size_t band_k = 1,
                             std::optional<KeywordMask> keyword_mask = std::nullopt);

std::size_t permitted_pairs(const AttentionMaskSpec& spec);

// Number of grid cells within Chebyshev radius `radius` of each cell, summed
// over all cells.
std::size_t band_pair_count(const GridShape& grid, std::size_t radius);

// Keys of the concatenated sequence permitted for one query, ascending.
std::vector<std::size_t> permitted_keys(const AttentionMaskSpec& spec,
                                        std::size_t query);

nlohmann::json to_json(const ModalityLayout& layout);
ModalityLayout layout_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AttentionMaskSpec& spec);
AttentionMaskSpec mask_from_json(const nlohmann::json& j);

}  // namespace pka
