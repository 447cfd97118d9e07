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

#include "pka/layout.hpp"

#include <algorithm>
#include <cstdlib>

#include "pka/errors.hpp"

namespace pka {

std::string_view to_string(ScoreNormalization mode) {
  switch (mode) {
    case ScoreNormalization::kSoftmax: return "softmax";
    case ScoreNormalization::kRelativeToMax: return "relative";
  }
  return "?";
}

ScoreNormalization parse_score_normalization(std::string_view name) {
  if (name == "softmax") return ScoreNormalization::kSoftmax;
  if (name == "relative") return ScoreNormalization::kRelativeToMax;
  throw ParameterError("unknown score normalization '" + std::string(name) + "'");
}

std::string Segment::name() const {
  switch (kind) {
    case SegmentKind::kText: return "T";
    case SegmentKind::kImage: return "X";
    case SegmentKind::kSpatial: return "SP" + std::to_string(index);
    case SegmentKind::kSubject: return "SJ" + std::to_string(index);
  }
  return "?";
}

ModalityLayout::ModalityLayout(std::size_t text_len, GridShape image_grid,
                               std::size_t spatial_count,
                               std::vector<std::size_t> subject_lengths,
                               std::vector<std::size_t> keywords,
                               std::vector<GridShape> spatial_grids)
    : text_len_(text_len),
      grid_(image_grid),
      spatial_count_(spatial_count),
      subject_lengths_(std::move(subject_lengths)),
      keywords_(std::move(keywords)) {
  if (grid_.size() == 0) throw ParameterError("image grid must be non-empty");
  if (text_len_ == 0) throw ParameterError("text segment must be non-empty");
  if (spatial_grids.empty()) spatial_grids.assign(spatial_count_, grid_);
  if (spatial_grids.size() != spatial_count_) {
    throw ParameterError("expected " + std::to_string(spatial_count_) +
                         " spatial grids, got " +
                         std::to_string(spatial_grids.size()));
  }
  for (std::size_t j = 0; j < spatial_grids.size(); ++j) {
    if (!(spatial_grids[j] == grid_)) {
      throw AlignmentError(
          "spatial condition " + std::to_string(j) + " grid " +
          std::to_string(spatial_grids[j].height) + "x" +
          std::to_string(spatial_grids[j].width) +
          " is not congruent with image grid " + std::to_string(grid_.height) +
          "x" + std::to_string(grid_.width));
    }
  }
  for (auto n : subject_lengths_) {
    if (n == 0) throw ParameterError("subject condition must have tokens");
  }
  if (keywords_.empty()) throw ParameterError("keyword set must be non-empty");
  for (auto k : keywords_) {
    if (k >= text_len_) {
      throw ParameterError("keyword index " + std::to_string(k) +
                           " outside text segment of length " +
                           std::to_string(text_len_));
    }
  }

  std::size_t offset = 0;
  auto push = [&](SegmentKind kind, std::size_t index, std::size_t len) {
    segments_.push_back(Segment{kind, index, offset, len});
    offset += len;
  };
  push(SegmentKind::kText, 0, text_len_);
  push(SegmentKind::kImage, 0, grid_.size());
  for (std::size_t j = 0; j < spatial_count_; ++j) {
    push(SegmentKind::kSpatial, j, grid_.size());
  }
  for (std::size_t j = 0; j < subject_lengths_.size(); ++j) {
    push(SegmentKind::kSubject, j, subject_lengths_[j]);
  }
  total_ = offset;
}

const Segment& ModalityLayout::spatial(std::size_t j) const {
  if (j >= spatial_count_) throw ParameterError("no spatial condition " + std::to_string(j));
  return segments_[2 + j];
}

const Segment& ModalityLayout::subject(std::size_t j) const {
  if (j >= subject_count()) throw ParameterError("no subject condition " + std::to_string(j));
  return segments_[2 + spatial_count_ + j];
}

std::size_t ModalityLayout::segment_index_of(std::size_t token) const {
  if (token >= total_) throw ContractViolation("token index out of range");
  for (std::size_t s = 0; s < segments_.size(); ++s) {
    if (token < segments_[s].offset + segments_[s].length) return s;
  }
  return segments_.size() - 1;
}

bool ModalityLayout::operator==(const ModalityLayout& o) const {
  return text_len_ == o.text_len_ && grid_ == o.grid_ &&
         spatial_count_ == o.spatial_count_ &&
         subject_lengths_ == o.subject_lengths_ && keywords_ == o.keywords_;
}

std::string_view to_string(MaskMode mode) {
  switch (mode) {
    case MaskMode::kDenseFull: return "dense";
    case MaskMode::kPka: return "pka";
    case MaskMode::kBand: return "band";
  }
  return "?";
}

MaskMode parse_mask_mode(std::string_view name) {
  if (name == "dense" || name == "dense-full") return MaskMode::kDenseFull;
  if (name == "pka") return MaskMode::kPka;
  if (name == "band") return MaskMode::kBand;
  throw ParameterError("unknown mask mode '" + std::string(name) + "'");
}

std::string_view to_string(BlockRuleKind kind) {
  switch (kind) {
    case BlockRuleKind::kAll: return "all";
    case BlockRuleKind::kNone: return "none";
    case BlockRuleKind::kDiagonal: return "diagonal";
    case BlockRuleKind::kBand: return "band";
    case BlockRuleKind::kRowGated: return "row-gated";
  }
  return "?";
}

AttentionMaskSpec::AttentionMaskSpec(ModalityLayout layout, MaskMode mode,
                                     std::size_t band_k,
                                     std::optional<KeywordMask> keyword_mask,
                                     std::vector<BlockRule> rules)
    : layout_(std::move(layout)),
      mode_(mode),
      band_k_(band_k),
      keyword_mask_(std::move(keyword_mask)),
      rules_(std::move(rules)) {
  const auto s = layout_.segments().size();
  if (rules_.size() != s * s) {
    throw ContractViolation("mask rule table has wrong size");
  }
}

const BlockRule& AttentionMaskSpec::rule(std::size_t q, std::size_t k) const {
  return rules_.at(q * layout_.segments().size() + k);
}

namespace {

std::size_t chebyshev(const GridShape& grid, std::size_t a, std::size_t b) {
  const auto ay = static_cast<long>(a / grid.width), ax = static_cast<long>(a % grid.width);
  const auto by = static_cast<long>(b / grid.width), bx = static_cast<long>(b % grid.width);
  return static_cast<std::size_t>(std::max(std::labs(ay - by), std::labs(ax - bx)));
}

// Positions along one axis of `extent` cells within `radius`, summed over
// all cells on that axis.
std::size_t axis_window_sum(std::size_t extent, std::size_t radius) {
  std::size_t total = 0;
  for (std::size_t i = 0; i < extent; ++i) {
    const std::size_t lo = i >= radius ? i - radius : 0;
    const std::size_t hi = std::min(extent - 1, i + radius);
    total += hi - lo + 1;
  }
  return total;
}

}  // namespace

std::size_t band_pair_count(const GridShape& grid, std::size_t radius) {
  return axis_window_sum(grid.height, radius) * axis_window_sum(grid.width, radius);
}

bool AttentionMaskSpec::permits(std::size_t query, std::size_t key) const {
  const auto qs = layout_.segment_index_of(query);
  const auto ks = layout_.segment_index_of(key);
  const auto& r = rule(qs, ks);
  const auto qi = query - layout_.segments()[qs].offset;
  const auto ki = key - layout_.segments()[ks].offset;
  switch (r.kind) {
    case BlockRuleKind::kAll: return true;
    case BlockRuleKind::kNone: return false;
    case BlockRuleKind::kDiagonal: return qi == ki;
    case BlockRuleKind::kBand:
      return chebyshev(layout_.grid(), qi, ki) <= (r.band_k - 1) / 2;
    case BlockRuleKind::kRowGated: return keyword_mask_->active[qi] != 0;
  }
  return false;
}

std::size_t AttentionMaskSpec::block_pairs(std::size_t q, std::size_t k) const {
  const auto& segs = layout_.segments();
  const auto& r = rule(q, k);
  switch (r.kind) {
    case BlockRuleKind::kAll: return segs[q].length * segs[k].length;
    case BlockRuleKind::kNone: return 0;
    case BlockRuleKind::kDiagonal: return segs[q].length;
    case BlockRuleKind::kBand:
      return band_pair_count(layout_.grid(), (r.band_k - 1) / 2);
    case BlockRuleKind::kRowGated:
      return keyword_mask_->active_count() * segs[k].length;
  }
  return 0;
}

AttentionMaskSpec build_mask(const ModalityLayout& layout, MaskMode mode,
                             std::size_t band_k,
                             std::optional<KeywordMask> keyword_mask) {
  if (mode == MaskMode::kBand && (band_k == 0 || band_k % 2 == 0)) {
    throw ParameterError("band mask requires odd k >= 1, got " + std::to_string(band_k));
  }
  if (keyword_mask) {
    if (mode == MaskMode::kDenseFull) {
      throw ParameterError("keyword gating applies to pka or band masks only");
    }
    if (keyword_mask->size() != layout.image_tokens()) {
      throw ParameterError("keyword mask length " +
                           std::to_string(keyword_mask->size()) +
                           " != image tokens " +
                           std::to_string(layout.image_tokens()));
    }
  }

  const auto& segs = layout.segments();
  const std::size_t s = segs.size();
  std::vector<BlockRule> rules(s * s);
  auto at = [&](std::size_t q, std::size_t k) -> BlockRule& { return rules[q * s + k]; };

  for (std::size_t q = 0; q < s; ++q) {
    for (std::size_t k = 0; k < s; ++k) {
      BlockRule& r = at(q, k);
      if (mode == MaskMode::kDenseFull) {
        r.kind = BlockRuleKind::kAll;
        continue;
      }
      const auto qk = segs[q].kind;
      const auto kk = segs[k].kind;
      const bool qk_main = qk == SegmentKind::kText || qk == SegmentKind::kImage;
      const bool kk_main = kk == SegmentKind::kText || kk == SegmentKind::kImage;
      if (qk_main && kk_main) {
        r.kind = BlockRuleKind::kAll;
      } else if (segs[q].is_condition()) {
        r.kind = (q == k) ? BlockRuleKind::kAll : BlockRuleKind::kNone;
      } else if (qk == SegmentKind::kImage && kk == SegmentKind::kSpatial) {
        if (mode == MaskMode::kBand) {
          r.kind = BlockRuleKind::kBand;
          r.band_k = band_k;
        } else {
          r.kind = BlockRuleKind::kDiagonal;
        }
      } else if (qk == SegmentKind::kImage && kk == SegmentKind::kSubject) {
        r.kind = keyword_mask ? BlockRuleKind::kRowGated : BlockRuleKind::kAll;
      } else {
        r.kind = BlockRuleKind::kNone;  // text never sees condition keys
      }
    }
  }
  return AttentionMaskSpec(layout, mode, band_k, std::move(keyword_mask),
                           std::move(rules));
}

std::size_t permitted_pairs(const AttentionMaskSpec& spec) {
  const std::size_t s = spec.layout().segments().size();
  std::size_t total = 0;
  for (std::size_t q = 0; q < s; ++q) {
    for (std::size_t k = 0; k < s; ++k) total += spec.block_pairs(q, k);
  }
  return total;
}

std::vector<std::size_t> permitted_keys(const AttentionMaskSpec& spec,
                                        std::size_t query) {
  std::vector<std::size_t> keys;
  for (std::size_t k = 0; k < spec.layout().total_length(); ++k) {
    if (spec.permits(query, k)) keys.push_back(k);
  }
  return keys;
}

nlohmann::json to_json(const ModalityLayout& layout) {
  return {
      {"text_len", layout.text_len()},
      {"grid", {layout.grid().height, layout.grid().width}},
      {"spatial_conditions", layout.spatial_count()},
      {"subject_lengths", layout.subject_lengths()},
      {"keywords", layout.keywords()},
      {"total_length", layout.total_length()},
  };
}

ModalityLayout layout_from_json(const nlohmann::json& j) {
  try {
    const auto grid = j.at("grid").get<std::vector<std::size_t>>();
    if (grid.size() != 2) throw ParameterError("grid must be [height, width]");
    std::vector<GridShape> spatial_grids;
    if (j.contains("spatial_grids")) {
      for (const auto& g : j.at("spatial_grids")) {
        spatial_grids.push_back({g.at(0).get<std::size_t>(), g.at(1).get<std::size_t>()});
      }
    }
    return ModalityLayout(
        j.at("text_len").get<std::size_t>(), GridShape{grid[0], grid[1]},
        j.value("spatial_conditions", std::size_t{0}),
        j.value("subject_lengths", std::vector<std::size_t>{}),
        j.at("keywords").get<std::vector<std::size_t>>(), spatial_grids);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid layout document: ") + e.what());
  }
}

nlohmann::json to_json(const AttentionMaskSpec& spec) {
  nlohmann::json blocks = nlohmann::json::array();
  const auto& segs = spec.layout().segments();
  for (std::size_t q = 0; q < segs.size(); ++q) {
    for (std::size_t k = 0; k < segs.size(); ++k) {
      const auto& r = spec.rule(q, k);
      if (r.kind == BlockRuleKind::kNone) continue;
      nlohmann::json b = {{"query", segs[q].name()},
                          {"key", segs[k].name()},
                          {"rule", to_string(r.kind)},
                          {"pairs", spec.block_pairs(q, k)}};
      if (r.kind == BlockRuleKind::kBand) b["k"] = r.band_k;
      blocks.push_back(std::move(b));
    }
  }
  nlohmann::json j = {{"mode", to_string(spec.mode())},
                      {"band_k", spec.band_k()},
                      {"layout", to_json(spec.layout())},
                      {"blocks", std::move(blocks)},
                      {"permitted_pairs", permitted_pairs(spec)}};
  if (spec.keyword_mask()) {
    const auto& m = *spec.keyword_mask();
    j["keyword_mask"] = {{"active", m.active},
                         {"step", m.step},
                         {"epsilon", m.epsilon},
                         {"normalization", to_string(m.mode)},
                         {"fell_back", m.fell_back}};
  } else {
    j["keyword_mask"] = nullptr;
  }
  return j;
}

AttentionMaskSpec mask_from_json(const nlohmann::json& j) {
  try {
    auto layout = layout_from_json(j.at("layout"));
    const auto mode = parse_mask_mode(j.at("mode").get<std::string>());
    std::optional<KeywordMask> kw;
    if (j.contains("keyword_mask") && !j.at("keyword_mask").is_null()) {
      const auto& m = j.at("keyword_mask");
      KeywordMask km;
      km.active = m.at("active").get<std::vector<std::uint8_t>>();
      km.step = m.value("step", -1);
      km.epsilon = m.value("epsilon", 0.0);
      km.mode = parse_score_normalization(m.value("normalization", std::string("softmax")));
      km.fell_back = m.value("fell_back", false);
      kw = std::move(km);
    }
    return build_mask(layout, mode, j.value("band_k", std::size_t{1}), std::move(kw));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid mask document: ") + e.what());
  }
}

}  // namespace pka
