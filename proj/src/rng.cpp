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

#include "pka/rng.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace pka {

std::uint64_t Rng::mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * kMix1;
  z = (z ^ (z >> 27)) * kMix2;
  return z ^ (z >> 31);
}

std::uint64_t Rng::next_u64() {
  state_ += kGamma;
  return mix(state_);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t bound) {
  if (bound == 0) throw ParameterError("Rng::below bound must be positive");
  // Rejection keeps the result unbiased for bounds that do not divide 2^64.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % bound;
}

double Rng::normal() {
  if (spare_) {
    const double z = *spare_;
    spare_.reset();
    return z;
  }
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(angle);
  return r * std::cos(angle);
}

double Rng::normal(double mu, double sigma) { return mu + sigma * normal(); }

Rng Rng::split(std::uint64_t stream) const {
  return Rng(mix(seed_ ^ mix(stream + kGamma)));
}

Tensor sample_normal(Rng& rng, double mu, double sigma, std::size_t n) {
  if (!(sigma > 0.0) || !std::isfinite(sigma) || !std::isfinite(mu)) {
    throw ParameterError("sample_normal requires finite mu and sigma > 0, got sigma=" +
                         std::to_string(sigma));
  }
  Tensor out(Shape{n});
  for (auto& v : out.data()) v = static_cast<float>(rng.normal(mu, sigma));
  return out;
}

}  // namespace pka
