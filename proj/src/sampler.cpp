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

#include "pka/sampler.hpp"

#include <algorithm>
#include <cmath>

#include <boost/math/distributions/normal.hpp>

#include "pka/errors.hpp"

namespace pka {

SamplerConfig SamplerConfig::preset(std::string_view name) {
  if (name == "csas") return csas();
  if (name == "standard") return standard();
  if (name == "reversed") return reversed();
  throw ParameterError("unknown sampler preset '" + std::string(name) +
                       "' (expected csas, standard or reversed)");
}

void SamplerConfig::validate() const {
  if (!std::isfinite(mu) || !std::isfinite(sigma) || !(sigma > 0.0)) {
    throw ParameterError("sampler needs finite mu and sigma > 0");
  }
}

Tensor64 sample_t(Rng& rng, const SamplerConfig& cfg, std::size_t n) {
  cfg.validate();
  auto out = Tensor64(Shape{n});
  for (auto& t : out.data()) {
    const double z = rng.normal(cfg.mu, cfg.sigma);
    t = 1.0 / (1.0 + std::exp(-z));
  }
  return out;
}

double cdf_t(const SamplerConfig& cfg, double t) {
  cfg.validate();
  if (!(t > 0.0 && t < 1.0)) {
    throw DomainError("cdf_t needs t in (0, 1), got " + std::to_string(t));
  }
  const double z = (std::log(t) - std::log1p(-t) - cfg.mu) / cfg.sigma;
  return 0.5 * std::erfc(-z / std::sqrt(2.0));
}

double quantile_t(const SamplerConfig& cfg, double p) {
  cfg.validate();
  if (!(p > 0.0 && p < 1.0)) {
    throw DomainError("quantile_t needs p in (0, 1), got " + std::to_string(p));
  }
  const boost::math::normal_distribution<double> normal(cfg.mu, cfg.sigma);
  const double z = boost::math::quantile(normal, p);
  return 1.0 / (1.0 + std::exp(-z));
}

double ks_statistic(std::vector<double> samples, const SamplerConfig& cfg) {
  if (samples.empty()) throw ParameterError("ks_statistic of an empty sample");
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double f = cdf_t(cfg, samples[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

namespace {

std::vector<double> grid_points(double step) {
  if (!(step > 0.0 && step < 1.0)) throw ParameterError("grid step must lie in (0, 1)");
  std::vector<double> ts;
  for (std::size_t i = 1;; ++i) {
    const double t = static_cast<double>(i) * step;
    if (t >= 1.0 - 1e-12) break;
    ts.push_back(t);
  }
  return ts;
}

}  // namespace

double max_dominance_violation(const SamplerConfig& a, const SamplerConfig& b, double step) {
  double worst = -1.0;
  for (double t : grid_points(step)) worst = std::max(worst, cdf_t(a, t) - cdf_t(b, t));
  return worst;
}

std::vector<double> dominance_violations(const SamplerConfig& a, const SamplerConfig& b,
                                         double step) {
  std::vector<double> out;
  for (double t : grid_points(step)) {
    if (cdf_t(a, t) > cdf_t(b, t)) out.push_back(t);
  }
  return out;
}

TimestepSummary summarize(const Tensor64& samples, const SamplerConfig& cfg) {
  std::vector<double> xs(samples.data().begin(), samples.data().end());
  if (xs.empty()) throw ParameterError("summary of an empty sample");
  TimestepSummary s;
  s.count = xs.size();
  double above = 0, total = 0;
  for (double t : xs) {
    above += t > 0.5 ? 1.0 : 0.0;
    total += t;
  }
  s.mean = total / static_cast<double>(xs.size());
  s.frac_above_half = above / static_cast<double>(xs.size());
  s.ks = ks_statistic(xs, cfg);
  auto mid = xs.begin() + static_cast<std::ptrdiff_t>(xs.size() / 2);
  std::nth_element(xs.begin(), mid, xs.end());
  s.median = *mid;
  if (xs.size() % 2 == 0) {
    s.median = 0.5 * (s.median + *std::max_element(xs.begin(), mid));
  }
  return s;
}

}  // namespace pka
