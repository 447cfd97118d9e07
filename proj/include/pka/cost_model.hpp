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

// Closed-form and instrumented accounting of attention work per forward
// pass. Convention: per permitted pair and head, 2d flops for the logit, 2d
// for the value accumulation and 5 for the softmax, so a block costs
// h (4d + 5) pairs. Score entries are counted per head.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "pka/layout.hpp"

namespace pka {

enum class StepKind { kFirst, kCached };

std::string_view to_string(StepKind kind);
StepKind parse_step_kind(std::string_view name);

struct BlockCost {
  std::string query;
  std::string key;
  std::size_t pairs = 0;  // per head
  std::uint64_t flops = 0;
  std::uint64_t score_bytes = 0;
};

struct CostReport {
  std::string mode;
  StepKind step = StepKind::kFirst;
  std::size_t length = 0;
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  std::size_t bytes_per_entry = 4;
  std::vector<BlockCost> blocks;
  std::size_t score_entries = 0;           // per head
  std::uint64_t attention_flops = 0;
  std::uint64_t projection_flops = 0;      // Q, K, V projections of the active rows
  std::uint64_t score_bytes = 0;           // all heads
  std::uint64_t peak_score_bytes = 0;      // largest single buffer
  std::optional<std::int64_t> wall_time_ns;

  std::uint64_t total_flops() const { return attention_flops + projection_flops; }
};

// Closed form. The cached step drops condition query rows and condition
// projections; a dense-full spec has no cacheable branch, so its cached step
// equals its first step.
CostReport predict_cost(const AttentionMaskSpec& spec, std::size_t head_dim,
                        std::size_t heads, StepKind step,
                        std::size_t bytes_per_entry = 4);

// Runs the engine on seeded random inputs with counters attached: the
// materializing baseline for dense-full specs, the block engine otherwise.
// Throws AccountingError when counters and closed form disagree. The wall
// time is the fastest of `repeats` runs.
CostReport measure_cost(const AttentionMaskSpec& spec, std::size_t head_dim,
                        std::size_t heads, StepKind step, std::uint64_t seed,
                        std::size_t repeats = 1);

nlohmann::json to_json(const CostReport& report);

// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace pka
