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

// Locality and sparsity statistics of attention maps.

#include <cstddef>
#include <vector>

#include "json.hpp"
#include "pka/layout.hpp"
#include "pka/tensor.hpp"

namespace pka {

struct BandMassProfile {
  std::vector<std::size_t> radii;
  std::vector<double> mass;
  // Where the matrix came from; -1 when unknown.
  int layer = -1;
  int head = -1;
  int step = -1;
};

// Mean over query rows of the probability within Chebyshev grid distance r
// of the query cell. `attn` is N x N with N = grid size, rows summing to 1
// within 1e-4; anything else raises ValidationError.
BandMassProfile band_mass(const Tensor64& attn, const GridShape& grid,
                          const std::vector<std::size_t>& radii);

// Element-wise mean of several profiles over the same radii (e.g. heads).
BandMassProfile average_profiles(const std::vector<BandMassProfile>& profiles);

// Mass of a uniform row within radius r, averaged over cells.
double uniform_band_mass(const GridShape& grid, std::size_t radius);

// Fraction of scores >= epsilon.
double keyword_sparsity(const std::vector<double>& scores, double epsilon);

nlohmann::json to_json(const BandMassProfile& profile);

}  // namespace pka
