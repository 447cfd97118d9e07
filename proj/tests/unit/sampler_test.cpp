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

#include <cmath>

#include "doctest.h"
#include "pka/sampler.hpp"

using namespace pka;

// Normal-CDF values frozen from scipy.stats.norm.
constexpr double kPhiThird = 0.6305586598182363;
constexpr double kPhiMinusThird = 0.36944134018176367;
constexpr double kSigmoidHalf = 0.6224593312018546;

TEST_CASE("presets carry the documented parameters") {
  CHECK(SamplerConfig::preset("csas").mu == 0.5);
  CHECK(SamplerConfig::preset("csas").sigma == 1.5);
  CHECK(SamplerConfig::preset("standard").mu == 0.0);
  CHECK(SamplerConfig::preset("standard").sigma == 1.0);
  CHECK(SamplerConfig::preset("reversed").mu == -0.5);
  CHECK(SamplerConfig::preset("reversed").sigma == 1.5);
  CHECK_THROWS_AS(SamplerConfig::preset("uniform"), ParameterError);
  CHECK_THROWS_AS((SamplerConfig{0.0, 0.0, "x"}.validate()), ParameterError);
}

TEST_CASE("cdf_t: closed-form values and domain") {
  CHECK(cdf_t(SamplerConfig::standard(), 0.5) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(std::abs(cdf_t(SamplerConfig::csas(), 0.5) - kPhiMinusThird) <= 1e-12);
  CHECK(std::abs(cdf_t(SamplerConfig::reversed(), 0.5) - kPhiThird) <= 1e-12);
  CHECK(std::abs(cdf_t(SamplerConfig::csas(), 0.2) - 0.10428096849175938) <= 1e-12);
  for (auto cfg : {SamplerConfig::csas(), SamplerConfig::standard(), SamplerConfig::reversed()}) {
    CHECK(cdf_t(cfg, 0.2) < cdf_t(cfg, 0.8));
  }
  CHECK_THROWS_AS(cdf_t(SamplerConfig::csas(), 0.0), DomainError);
  CHECK_THROWS_AS(cdf_t(SamplerConfig::csas(), 1.0), DomainError);
  CHECK_THROWS_AS(cdf_t(SamplerConfig::csas(), -0.3), DomainError);
}

TEST_CASE("quantile_t inverts cdf_t") {
  CHECK(std::abs(quantile_t(SamplerConfig::csas(), 0.5) - kSigmoidHalf) <= 1e-12);
  CHECK(std::abs(quantile_t(SamplerConfig::csas(), 0.9) - 0.9185141068714684) <= 1e-10);
  for (double p : {0.01, 0.3, 0.77, 0.99}) {
    CHECK(std::abs(cdf_t(SamplerConfig::reversed(), quantile_t(SamplerConfig::reversed(), p)) - p) <=
          1e-12);
  }
  CHECK_THROWS_AS(quantile_t(SamplerConfig::csas(), 1.0), DomainError);
}

TEST_CASE("sample_t: empirical statistics at n = 1e5") {
  struct Case {
    SamplerConfig cfg;
    double median, above;
  };
  for (const auto& c : {Case{SamplerConfig::standard(), 0.5, 0.5},
                        Case{SamplerConfig::csas(), kSigmoidHalf, kPhiThird},
                        Case{SamplerConfig::reversed(), 1.0 - kSigmoidHalf, kPhiMinusThird}}) {
    Rng rng(1);
    const auto s = summarize(sample_t(rng, c.cfg, 100000), c.cfg);
    INFO(c.cfg.name);
    CHECK(std::abs(s.median - c.median) <= 0.01);
    CHECK(std::abs(s.frac_above_half - c.above) <= 0.01);
    CHECK(s.ks <= 0.01);
  }
}

TEST_CASE("ks_statistic: detects a wrong distribution") {
  Rng rng(2);
  const auto s = sample_t(rng, SamplerConfig::reversed(), 20000);
  std::vector<double> xs(s.data().begin(), s.data().end());
  CHECK(ks_statistic(xs, SamplerConfig::reversed()) <= 0.015);
  CHECK(ks_statistic(xs, SamplerConfig::csas()) > 0.1);
  // One sample at the median: sup gap is exactly 1/2.
  CHECK(ks_statistic({0.5}, SamplerConfig::standard()) == doctest::Approx(0.5));
}

TEST_CASE("dominance: csas over reversed everywhere, over standard only for t > sigmoid(-1)") {
  CHECK(max_dominance_violation(SamplerConfig::csas(), SamplerConfig::reversed()) <= 0.0);
  CHECK(dominance_violations(SamplerConfig::csas(), SamplerConfig::reversed()).empty());
  CHECK(dominance_violations(SamplerConfig::standard(), SamplerConfig::reversed()).size() > 0);

  // The wider csas spread fattens the low-t tail: (logit t - 0.5) / 1.5 >
  // logit t exactly when logit t < -1.
  const auto bad = dominance_violations(SamplerConfig::csas(), SamplerConfig::standard());
  const double edge = 1.0 / (1.0 + std::exp(1.0));
  REQUIRE_FALSE(bad.empty());
  CHECK(bad.front() == doctest::Approx(0.01));
  CHECK(bad.back() < edge);
  CHECK(bad.back() > edge - 0.01);
  // scipy: max over the grid of Phi((logit t - 0.5)/1.5) - Phi(logit t).
  CHECK(std::abs(max_dominance_violation(SamplerConfig::csas(), SamplerConfig::standard()) -
                 0.02674134442731168) <= 1e-10);
}

TEST_CASE("sample_t: same normal draws map monotonically across presets") {
  Rng a(9), b(9);
  const auto x = sample_t(a, SamplerConfig::csas(), 500);
  const auto y = sample_t(b, SamplerConfig::reversed(), 500);
  for (std::size_t i = 0; i < 500; ++i) {
    REQUIRE(x[i] > 0.0);
    REQUIRE(x[i] < 1.0);
    CHECK(x[i] > y[i]);
  }
}
