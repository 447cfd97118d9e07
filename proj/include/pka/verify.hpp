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

// Seeded self-checks shared by the CLI and the acceptance run.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace pka {

struct EquivalenceReport {
  std::size_t instances = 0;
  double worst_fp32 = 0.0;
  double worst_fp64 = 0.0;
  double tolerance_fp32 = 1e-5;
  double tolerance_fp64 = 1e-10;
  double seconds = 0.0;
  bool passed() const { return worst_fp32 <= tolerance_fp32 && worst_fp64 <= tolerance_fp64; }
};

// Random layouts over M in {2, 8}, N in {4, 16, 64}, c in 0..3, s in 0..2,
// h in {1, 4}, d in {4, 16}, pka or band masks with and without keyword
// gating. Sparse engine against the dense masked oracle.
EquivalenceReport run_equivalence(std::size_t instances = 200, std::uint64_t seed = 2025);

struct GradcheckEntry {
  std::string name;
  std::size_t instances = 0;
  double worst_rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 1e-4;
  double seconds = 0.0;
  bool passed() const;
};

// fp64 central differences for every attention kernel and the flow
// matching loss, `instances` seeded draws each.
GradcheckReport run_gradcheck(std::size_t instances = 20, std::uint64_t seed = 7);

struct FallbackReport {
  std::size_t masks_checked = 0;
  std::size_t empty_rows = 0;
  bool fallback_triggered = false;  // an impossible threshold fell back to all-active
  bool passed() const { return empty_rows == 0 && fallback_triggered; }
};

// Every keyword mask on small grids, plus a forced all-inactive threshold:
// no query row may end up with zero permitted keys.
FallbackReport run_fallback_check();

nlohmann::json to_json(const EquivalenceReport& r);
nlohmann::json to_json(const GradcheckReport& r);
nlohmann::json to_json(const FallbackReport& r);

}  // namespace pka
