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

#include "pka/cost_model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>

#include "pka/attention_dense.hpp"
#include "pka/attention_sparse.hpp"
#include "pka/counters.hpp"
#include "pka/errors.hpp"
#include "pka/rng.hpp"

namespace pka {

std::string_view to_string(StepKind kind) {
  return kind == StepKind::kFirst ? "first" : "cached";
}

StepKind parse_step_kind(std::string_view name) {
  if (name == "first") return StepKind::kFirst;
  if (name == "cached") return StepKind::kCached;
  throw ParameterError("unknown step kind '" + std::string(name) + "'");
}

namespace {

bool cacheable(const AttentionMaskSpec& spec) { return spec.mode() != MaskMode::kDenseFull; }

}  // namespace

CostReport predict_cost(const AttentionMaskSpec& spec, std::size_t head_dim,
                        std::size_t heads, StepKind step, std::size_t bytes_per_entry) {
  if (head_dim == 0 || heads == 0) throw ParameterError("heads and head_dim must be >= 1");
  const auto& layout = spec.layout();
  const auto& segs = layout.segments();
  const bool skip_conditions = step == StepKind::kCached && cacheable(spec);
  const std::uint64_t per_pair = heads * (4 * head_dim + 5);
  const std::uint64_t width = heads * head_dim;

  CostReport r;
  r.mode = std::string(to_string(spec.mode()));
  r.step = step;
  r.length = layout.total_length();
  r.heads = heads;
  r.head_dim = head_dim;
  r.bytes_per_entry = bytes_per_entry;

  for (std::size_t qs = 0; qs < segs.size(); ++qs) {
    if (skip_conditions && segs[qs].is_condition()) continue;
    r.projection_flops += 2 * segs[qs].length * width * 3 * width;
    for (std::size_t ks = 0; ks < segs.size(); ++ks) {
      const std::size_t pairs = spec.block_pairs(qs, ks);
      if (spec.rule(qs, ks).kind == BlockRuleKind::kNone) continue;
      BlockCost b{segs[qs].name(), segs[ks].name(), pairs, per_pair * pairs,
                  static_cast<std::uint64_t>(heads) * pairs * bytes_per_entry};
      r.score_entries += pairs;
      r.attention_flops += b.flops;
      r.score_bytes += b.score_bytes;
      if (spec.mode() != MaskMode::kDenseFull) {
        r.peak_score_bytes = std::max<std::uint64_t>(r.peak_score_bytes, pairs * bytes_per_entry);
      }
      r.blocks.push_back(std::move(b));
    }
  }
  if (spec.mode() == MaskMode::kDenseFull) {
    r.peak_score_bytes = static_cast<std::uint64_t>(r.length) * r.length * bytes_per_entry;
  }
  return r;
}

CostReport measure_cost(const AttentionMaskSpec& spec, std::size_t head_dim,
                        std::size_t heads, StepKind step, std::uint64_t seed,
                        std::size_t repeats) {
  auto report = predict_cost(spec, head_dim, heads, step, sizeof(float));
  const std::size_t L = spec.layout().total_length();
  Rng rng(seed);
  AttentionInputs<float> in;
  in.q = random_normal<float>(rng, Shape{L, heads * head_dim});
  in.k = random_normal<float>(rng, Shape{L, heads * head_dim});
  in.v = random_normal<float>(rng, Shape{L, heads * head_dim});
  in.heads = heads;
  const bool dense = spec.mode() == MaskMode::kDenseFull;
  const EngineOptions options{step == StepKind::kCached && cacheable(spec)};

  std::int64_t best = std::numeric_limits<std::int64_t>::max();
  CostCounters counters;
  for (std::size_t rep = 0; rep < std::max<std::size_t>(repeats, 1); ++rep) {
    counters.clear();
    const auto start = std::chrono::steady_clock::now();
    const auto out = dense ? mma_full(in, &counters) : pka_attention(in, spec, &counters, options);
    const auto stop = std::chrono::steady_clock::now();
    if (!all_finite(out)) throw AccountingError("non-finite attention output while measuring");
    best = std::min<std::int64_t>(
        best, std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count());
  }
  report.wall_time_ns = best;

  auto mismatch = [](const std::string& what, std::size_t measured, std::size_t predicted) {
    return AccountingError(what + ": counted " + std::to_string(measured) +
                           " score entries, closed form says " + std::to_string(predicted));
  };
  if (dense) {
    if (counters.total_pairs() != report.score_entries * heads) {
      throw mismatch("dense pass", counters.total_pairs(), report.score_entries * heads);
    }
  } else {
    std::map<std::pair<std::string, std::string>, std::size_t> predicted;
    for (const auto& b : report.blocks) predicted[{b.query, b.key}] = b.pairs * heads;
    for (const auto& [key, block] : counters.blocks()) {
      const auto it = predicted.find(key);
      const std::size_t want = it == predicted.end() ? 0 : it->second;
      if (block.pairs != want) throw mismatch(key.first + "->" + key.second, block.pairs, want);
    }
    for (const auto& [key, want] : predicted) {
      const auto it = counters.blocks().find(key);
      const std::size_t got = it == counters.blocks().end() ? 0 : it->second.pairs;
      if (got != want) throw mismatch(key.first + "->" + key.second, got, want);
    }
  }
  const std::uint64_t peak = static_cast<std::uint64_t>(counters.peak_entries()) * sizeof(float);
  if (peak > report.peak_score_bytes) {
    throw AccountingError("peak score buffer " + std::to_string(peak) +
                          " bytes exceeds the closed-form bound " +
                          std::to_string(report.peak_score_bytes));
  }
  return report;
}

nlohmann::json to_json(const CostReport& r) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : r.blocks) {
    blocks.push_back({{"query", b.query},
                      {"key", b.key},
                      {"score_entries", b.pairs},
                      {"flops", b.flops},
                      {"score_bytes", b.score_bytes}});
  }
  nlohmann::json j{{"mode", r.mode},
                   {"step_kind", to_string(r.step)},
                   {"length", r.length},
                   {"heads", r.heads},
                   {"head_dim", r.head_dim},
                   {"bytes_per_entry", r.bytes_per_entry},
                   {"blocks", blocks},
                   {"score_entries", r.score_entries},
                   {"attention_flops", r.attention_flops},
                   {"projection_flops", r.projection_flops},
                   {"total_flops", r.total_flops()},
                   {"score_bytes", r.score_bytes},
                   {"peak_score_bytes", r.peak_score_bytes}};
  j["wall_time_ns"] = r.wall_time_ns ? nlohmann::json(*r.wall_time_ns) : nlohmann::json(nullptr);
  return j;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw ParameterError("slope needs two or more paired points");
  }
  double mx = 0, my = 0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0) || !(y[i] > 0)) throw DomainError("log-log slope needs positive values");
    mx += std::log(x[i]) / n;
    my += std::log(y[i]) / n;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0) throw DomainError("log-log slope needs distinct x values");
  return sxy / sxx;
}

}  // namespace pka
