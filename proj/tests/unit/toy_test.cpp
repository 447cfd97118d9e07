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

#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "pka/toy_dit.hpp"
#include "test_support.hpp"

using namespace pka;

namespace {

ToyModelConfig tiny() {
  ToyModelConfig c;
  c.layers = 1;
  c.heads = 2;
  c.head_dim = 2;
  c.grid = {2, 2};
  c.text_len = 2;
  c.vocab = 4;
  c.keyword_slot = 0;
  c.subject_len = 2;
  c.subject_dim = 2;
  c.mlp_ratio = 1;
  c.time_features = 2;
  return c;
}

ToyModelConfig small() {
  ToyModelConfig c;
  c.grid = {4, 4};
  c.subject_len = 3;
  return c;
}

template <typename T>
BasicTensor<T> noise_like(const ToyModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return random_normal<T>(rng, Shape{cfg.grid.size(), cfg.channels});
}

}  // namespace

TEST_CASE("flow matching path: endpoints and constant velocity") {
  Rng rng(1);
  const auto x = testing::random64(rng, 5, 1), e = testing::random64(rng, 5, 1);
  CHECK(max_abs_diff(interpolate(x, e, 0.0), x) == 0.0);
  CHECK(max_abs_diff(interpolate(x, e, 1.0), e) == 0.0);
  const auto v = velocity_target(x, e);
  const auto a = interpolate(x, e, 0.3), b = interpolate(x, e, 0.7);
  for (std::size_t i = 0; i < 5; ++i) CHECK((b[i] - a[i]) / 0.4 == doctest::Approx(v[i]));
}

TEST_CASE("flow matching loss: zero for a predictor that returns the target") {
  Rng rng(2);
  const auto x = testing::random64(rng, 4, 1), e = testing::random64(rng, 4, 1);
  ad::Tape<double> tape;
  const auto target = velocity_target(x, e);
  CHECK(tape.value(ad::mse(tape.constant(target), tape.constant(target)))[0] == 0.0);

  const ToyDiT<double> model(tiny(), 3);
  const auto sample = make_dataset<double>(tiny(), 1, 4)[0];
  const auto params = bind_params(model, tape, true);
  ForwardOptions<double> fo;
  CHECK_THROWS_AS(flow_matching_loss(model, tape, params, sample, 0.0, e, fo), DomainError);
  CHECK_THROWS_AS(flow_matching_loss(model, tape, params, sample, 1.0, e, fo), DomainError);
}

TEST_CASE("flow matching loss: fd gradient over every parameter") {
  const auto cfg = tiny();
  const ToyDiT<double> model(cfg, 5);
  const auto sample = make_dataset<double>(cfg, 1, 6)[0];
  const auto noise = noise_like<double>(cfg, 7);
  KeywordMask km;
  km.active = {1, 0, 0, 1};

  for (int variant = 0; variant < 3; ++variant) {
    ForwardOptions<double> fo;
    if (variant == 1) fo.layer_masks = {km};
    if (variant == 2) {
      fo.backend = AttentionBackend::kDense;
      fo.mask = MaskMode::kDenseFull;
    }
    const auto report = ad::fd_check<double>(
        [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& vars) {
          return flow_matching_loss(model, tape, vars, sample, 0.37, noise, fo);
        },
        model.params(), 1e-5);
    INFO("variant " << variant << " max rel error " << report.max_rel_error);
    CHECK(report.checked == model.parameter_count());
    CHECK(report.max_rel_error <= 1e-4);
  }
}

TEST_CASE("denoise: one step is a single Euler update from t=1") {
  const auto cfg = small();
  const ToyDiT<double> model(cfg, 8);
  const auto sample = make_dataset<double>(cfg, 1, 9)[0];
  const auto noise = noise_like<double>(cfg, 10);
  DenoiseOptions o;
  o.steps = 1;
  o.use_cache = false;
  o.keyword_gating = false;
  const auto r = denoise(model, sample, noise, o);

  ad::Tape<double> tape;
  const auto params = bind_params(model, tape, false);
  const auto v = forward(model, tape, params, noise, 1.0, sample, ForwardOptions<double>{});
  auto expect = noise;
  for (std::size_t i = 0; i < expect.size(); ++i) expect[i] -= v.velocity.value()[i];
  CHECK(max_abs_diff(r.image, expect) == 0.0);
  CHECK_THROWS_AS(denoise(model, sample, noise, DenoiseOptions{.steps = 0}), ParameterError);
}

TEST_CASE("denoise: cache on and off agree exactly in fp64 over 28 steps") {
  const auto cfg = small();
  const ToyDiT<double> model(cfg, 11);
  const auto sample = make_dataset<double>(cfg, 1, 12)[0];
  const auto noise = noise_like<double>(cfg, 13);
  for (auto mask : {MaskMode::kPka, MaskMode::kBand}) {
    DenoiseOptions on;
    on.mask = mask;
    on.band_k = 3;
    auto off = on;
    off.use_cache = false;
    const auto a = denoise(model, sample, noise, on);
    const auto b = denoise(model, sample, noise, off);
    CHECK(max_abs_diff(a.image, b.image) == 0.0);
    CHECK_FALSE(a.trace[0].cache_hit);
    for (std::size_t i = 1; i < a.trace.size(); ++i) CHECK(a.trace[i].cache_hit);
    CHECK(a.cache_bytes == ConditionCache<double>::expected_bytes(cfg.layout(), cfg.layers, cfg.width()));
    CHECK(b.cache_bytes == 0);
  }
  DenoiseOptions dense;
  dense.mask = MaskMode::kDenseFull;
  CHECK_THROWS_AS(denoise(model, sample, noise, dense), ParameterError);
}

TEST_CASE("denoise: sparse and dense backends agree in fp32 over 28 steps") {
  const auto cfg = small();
  const ToyDiT<float> model(cfg, 14);
  const auto sample = make_dataset<float>(cfg, 1, 15)[0];
  const auto noise = noise_like<float>(cfg, 16);
  for (auto mask : {MaskMode::kPka, MaskMode::kBand}) {
    DenoiseOptions sparse;
    sparse.mask = mask;
    sparse.band_k = 3;
    auto dense = sparse;
    dense.backend = AttentionBackend::kDense;
    const auto a = denoise(model, sample, noise, sparse);
    const auto b = denoise(model, sample, noise, dense);
    CHECK(max_abs_diff(a.image, b.image) <= 1e-4);
  }
}

TEST_CASE("keyword masks: computed at step t, applied at step t+1") {
  const auto cfg = small();
  const ToyDiT<double> model(cfg, 17);
  const auto sample = make_dataset<double>(cfg, 1, 18)[0];
  DenoiseOptions o;
  o.steps = 10;
  const auto r = denoise(model, sample, noise_like<double>(cfg, 19), o);
  REQUIRE(r.trace.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      CHECK(r.trace[i].computed_mask_step[l] == static_cast<int>(i));
      CHECK(r.trace[i].applied_mask_step[l] == static_cast<int>(i) - 1);
    }
    if (i == 0) {
      CHECK(r.applied_masks[0].empty());
      continue;
    }
    REQUIRE(r.applied_masks[i].size() == cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      CHECK(r.applied_masks[i][l].active == r.computed_masks[i - 1][l].active);
      CHECK(r.applied_masks[i][l].active_count() > 0);
    }
  }
}

TEST_CASE("keyword masks: epsilon 0 reproduces ungated X->SJ") {
  const auto cfg = small();
  const ToyDiT<double> model(cfg, 20);
  const auto sample = make_dataset<double>(cfg, 1, 21)[0];
  const auto noise = noise_like<double>(cfg, 22);
  DenoiseOptions gated;
  gated.epsilon = 0.0;
  auto ungated = gated;
  ungated.keyword_gating = false;
  const auto a = denoise(model, sample, noise, gated);
  const auto b = denoise(model, sample, noise, ungated);
  for (const auto& step : a.computed_masks) {
    for (const auto& m : step) CHECK(m.active_count() == cfg.grid.size());
  }
  CHECK(max_abs_diff(a.image, b.image) == 0.0);
}

TEST_CASE("model: save and load round trip") {
  const auto cfg = small();
  const ToyDiT<float> model(cfg, 23);
  const auto path = (std::filesystem::temp_directory_path() / "pka_toy_roundtrip.bin").string();
  model.save(path);
  const auto back = ToyDiT<float>::load(cfg, path);
  std::filesystem::remove(path);
  CHECK(max_abs_diff(back.text_table(), model.text_table()) == 0.0);
  REQUIRE(back.params().size() == model.params().size());
  for (std::size_t i = 0; i < back.params().size(); ++i) {
    CHECK(max_abs_diff(back.params()[i], model.params()[i]) == 0.0);
  }
  auto other = cfg;
  other.layers = 3;
  const auto path2 = (std::filesystem::temp_directory_path() / "pka_toy_mismatch.bin").string();
  model.save(path2);
  CHECK_THROWS(ToyDiT<float>::load(other, path2));
  std::filesystem::remove(path2);
}

TEST_CASE("config: json round trip and validation") {
  const auto cfg = small();
  const auto back = model_config_from_json(nlohmann::json::parse(to_json(cfg).dump()));
  CHECK(back.layout() == cfg.layout());
  CHECK(back.width() == cfg.width());
  auto bad = cfg;
  bad.keyword_slot = cfg.text_len;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  CHECK_THROWS_AS(model_config_from_json(nlohmann::json{{"layers", "two"}}), FormatError);
}

TEST_CASE("training: deterministic and the evaluation loss falls") {
  TrainConfig cfg;
  cfg.model.grid = {4, 4};
  cfg.iterations = 300;
  cfg.eval_every = 150;
  cfg.eval_samples = 2;
  cfg.loss_eval_pairs = 16;
  cfg.seed = 3;
  const auto a = train(cfg);
  const auto b = train(cfg);
  for (std::size_t i = 0; i < a.model.params().size(); ++i) {
    REQUIRE(max_abs_diff(a.model.params()[i], b.model.params()[i]) == 0.0);
  }
  CHECK(a.trace.size() == 300);
  CHECK(a.timesteps.size() == 300 * cfg.batch);
  INFO("initial " << a.initial_eval_loss << " final " << a.final_eval_loss);
  CHECK(a.final_eval_loss < 0.5 * a.initial_eval_loss);
  CHECK(a.trace.back().recon_mse.has_value());
}
