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

#include <cstddef>
#include <cstdint>
#include <optional>

#include "pka/tensor.hpp"

namespace pka {

// Counter-based SplitMix64 generator.
//
// The n-th raw output (n = 1, 2, ...) for seed s is
//
//   z = s + n * 0x9E3779B97F4A7C15           (mod 2^64)
//   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   out = z ^ (z >> 31)
//
// Uniforms use the top 53 bits: u = (out >> 11) * 2^-53, in [0, 1).
// Normals use Box-Muller on a pair (u1, u2) with u1 replaced by 1 - u1 so the
// logarithm argument is in (0, 1]:
//
//   r = sqrt(-2 ln(1 - u1)),  z0 = r cos(2 pi u2),  z1 = r sin(2 pi u2)
//
// z0 is returned first and z1 is held for the next call. The integer stream
// is bit-identical on every platform; the normal stream additionally depends
// on the platform's log/cos/sin being correctly rounded.
//
// An Rng is single-owner state. Use split() to derive independent streams.
class Rng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
  static constexpr std::uint64_t kMix1 = 0xBF58476D1CE4E5B9ULL;
  static constexpr std::uint64_t kMix2 = 0x94D049BB133111EBULL;

  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  double uniform();
  // Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);
  double normal();
  double normal(double mu, double sigma);

  // A generator whose stream is a pure function of (this seed, stream id);
  // it does not advance this generator.
  Rng split(std::uint64_t stream) const;

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  static std::uint64_t mix(std::uint64_t z);

  std::uint64_t state_;
  std::uint64_t seed_ = state_;
  std::optional<double> spare_;
};

// n independent N(mu, sigma^2) draws. sigma must be positive.
Tensor sample_normal(Rng& rng, double mu, double sigma, std::size_t n);

template <typename T>
BasicTensor<T> random_normal(Rng& rng, Shape shape, double scale = 1.0) {
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(scale * rng.normal());
  return t;
}

}  // namespace pka
