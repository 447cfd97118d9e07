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

#include "pka/redundancy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "pka/errors.hpp"

namespace pka {

namespace {

std::size_t chebyshev(const GridShape& grid, std::size_t a, std::size_t b) {
  const auto ra = static_cast<long>(a / grid.width), ca = static_cast<long>(a % grid.width);
  const auto rb = static_cast<long>(b / grid.width), cb = static_cast<long>(b % grid.width);
  return static_cast<std::size_t>(std::max(std::labs(ra - rb), std::labs(ca - cb)));
}

}  // namespace

BandMassProfile band_mass(const Tensor64& attn, const GridShape& grid,
                          const std::vector<std::size_t>& radii) {
  const std::size_t n = grid.size();
  if (attn.rank() != 2 || attn.dim(0) != n || attn.dim(1) != n) {
    throw ValidationError("band_mass expects a " + std::to_string(n) + "x" + std::to_string(n) +
                          " matrix for a " + std::to_string(grid.height) + "x" +
                          std::to_string(grid.width) + " grid, got " +
                          shape_string(attn.shape()));
  }
  if (radii.empty()) throw ParameterError("band_mass needs at least one radius");
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double p = attn(i, j);
      if (!std::isfinite(p) || p < 0) {
        throw ValidationError("row " + std::to_string(i) + " has a negative or non-finite entry");
      }
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-4) {
      throw ValidationError("row " + std::to_string(i) + " sums to " + std::to_string(total) +
                            ", not 1");
    }
  }

  // Mass per exact distance, then prefix sums.
  const std::size_t max_d = std::max(grid.height, grid.width);
  std::vector<double> by_distance(max_d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) by_distance[chebyshev(grid, i, j)] += attn(i, j);
  }
  BandMassProfile p;
  p.radii = radii;
  for (std::size_t r : radii) {
    double m = 0;
    for (std::size_t dist = 0; dist < max_d && dist <= r; ++dist) m += by_distance[dist];
    p.mass.push_back(m / static_cast<double>(n));
  }
  return p;
}

BandMassProfile average_profiles(const std::vector<BandMassProfile>& profiles) {
  if (profiles.empty()) throw ParameterError("nothing to average");
  BandMassProfile out = profiles.front();
  for (std::size_t k = 1; k < profiles.size(); ++k) {
    if (profiles[k].radii != out.radii) throw ParameterError("profiles use different radii");
    for (std::size_t i = 0; i < out.mass.size(); ++i) out.mass[i] += profiles[k].mass[i];
  }
  for (auto& m : out.mass) m /= static_cast<double>(profiles.size());
  out.head = -1;
  return out;
}

double uniform_band_mass(const GridShape& grid, std::size_t radius) {
  const double n = static_cast<double>(grid.size());
  return static_cast<double>(band_pair_count(grid, radius)) / (n * n);
}

double keyword_sparsity(const std::vector<double>& scores, double epsilon) {
  if (scores.empty()) throw ParameterError("keyword_sparsity of an empty score vector");
  std::size_t active = 0;
  for (double s : scores) active += s >= epsilon ? 1 : 0;
  return static_cast<double>(active) / static_cast<double>(scores.size());
}

nlohmann::json to_json(const BandMassProfile& p) {
  nlohmann::json j{{"radii", p.radii}, {"mass", p.mass}};
  j["layer"] = p.layer >= 0 ? nlohmann::json(p.layer) : nlohmann::json(nullptr);
  j["head"] = p.head >= 0 ? nlohmann::json(p.head) : nlohmann::json(nullptr);
  j["step"] = p.step >= 0 ? nlohmann::json(p.step) : nlohmann::json(nullptr);
  return j;
}

}  // namespace pka
