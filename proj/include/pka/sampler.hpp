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

// Logit-normal timestep samplers. Convention: t = 1 is pure noise, t = 0 is
// data.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "pka/rng.hpp"
#include "pka/tensor.hpp"

namespace pka {

struct SamplerConfig {
  double mu = 0.0;
  double sigma = 1.0;
  std::string name = "standard";

  static SamplerConfig csas() { return {0.5, 1.5, "csas"}; }
  static SamplerConfig standard() { return {0.0, 1.0, "standard"}; }
  static SamplerConfig reversed() { return {-0.5, 1.5, "reversed"}; }
  // "csas", "standard" or "reversed".
  static SamplerConfig preset(std::string_view name);

  // Throws ParameterError unless sigma > 0 and both are finite.
  void validate() const;
};

// t = sigmoid(z), z ~ N(mu, sigma^2).
Tensor64 sample_t(Rng& rng, const SamplerConfig& cfg, std::size_t n);

// P(T <= t). Throws DomainError outside (0, 1).
double cdf_t(const SamplerConfig& cfg, double t);
// Inverse of cdf_t for p in (0, 1).
double quantile_t(const SamplerConfig& cfg, double p);

// sup |F_n - F| of the samples against cdf_t.
double ks_statistic(std::vector<double> samples, const SamplerConfig& cfg);

// Largest cdf_t(a, t) - cdf_t(b, t) over t = step, 2 step, ... < 1. A value
// <= 0 means a is stochastically larger than b on the grid.
double max_dominance_violation(const SamplerConfig& a, const SamplerConfig& b,
                               double step = 0.01);
// Grid points where cdf_t(a, t) > cdf_t(b, t).
std::vector<double> dominance_violations(const SamplerConfig& a, const SamplerConfig& b,
                                         double step = 0.01);

struct TimestepSummary {
  std::size_t count = 0;
  double median = 0.0;
  double mean = 0.0;
  double frac_above_half = 0.0;
  double ks = 0.0;
};

TimestepSummary summarize(const Tensor64& samples, const SamplerConfig& cfg);

}  // namespace pka
