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

#include "pka/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "pka/attention_dense.hpp"
#include "pka/attention_ops.hpp"
#include "pka/attention_sparse.hpp"
#include "pka/autodiff.hpp"
#include "pka/layout.hpp"
#include "pka/rng.hpp"
#include "pka/toy_dit.hpp"

namespace pka {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename T>
AttentionInputs<T> random_inputs(Rng& rng, std::size_t L, std::size_t heads, std::size_t d) {
  AttentionInputs<T> in;
  in.q = random_normal<T>(rng, Shape{L, heads * d});
  in.k = random_normal<T>(rng, Shape{L, heads * d});
  in.v = random_normal<T>(rng, Shape{L, heads * d});
  in.heads = heads;
  return in;
}

KeywordMask random_mask(Rng& rng, std::size_t n, double fraction) {
  KeywordMask m;
  m.active.resize(n);
  for (auto& a : m.active) a = rng.uniform() < fraction ? 1 : 0;
  return m;
}

// Weighted sum so each output element carries a distinct upstream gradient.
ad::Var<double> probe(ad::Tape<double>& tape, ad::Var<double> x, Rng& rng) {
  auto w = tape.constant(random_normal<double>(rng, x.shape()));
  return ad::sum(ad::mul(x, w));
}

std::vector<std::uint8_t> random_bits(Rng& rng, std::size_t n) {
  std::vector<std::uint8_t> bits(n);
  for (auto& b : bits) b = static_cast<std::uint8_t>(rng.below(2));
  return bits;
}

}  // namespace

EquivalenceReport run_equivalence(std::size_t instances, std::uint64_t seed) {
  const auto t0 = Clock::now();
  EquivalenceReport r;
  Rng meta(seed);
  const std::size_t Ms[] = {2, 8}, sides[] = {2, 4, 8}, hs[] = {1, 4}, ds[] = {4, 16};
  for (std::size_t trial = 0; trial < instances; ++trial) {
    const std::size_t M = Ms[meta.below(2)], side = sides[meta.below(3)];
    const std::size_t c = meta.below(4), s = meta.below(3);
    const std::size_t h = hs[meta.below(2)], d = ds[meta.below(2)];
    std::vector<std::size_t> subjects(s);
    for (auto& n : subjects) n = 1 + meta.below(8);
    const ModalityLayout layout(M, {side, side}, c, subjects, {meta.below(M)});
    const auto mode = meta.below(3) == 0 ? MaskMode::kBand : MaskMode::kPka;
    const std::size_t band_k = 1 + 2 * meta.below(3);
    std::optional<KeywordMask> km;
    if (meta.below(2)) km = random_mask(meta, side * side, meta.uniform());
    const auto spec = build_mask(layout, mode, band_k, km);

    const std::uint64_t draw = meta.next_u64();
    Rng r32(draw), r64(draw);
    const auto in32 = random_inputs<float>(r32, layout.total_length(), h, d);
    const auto in64 = random_inputs<double>(r64, layout.total_length(), h, d);
    r.worst_fp32 = std::max(
        r.worst_fp32,
        static_cast<double>(max_abs_diff(pka_attention(in32, spec), masked_attention_oracle(in32, spec))));
    r.worst_fp64 = std::max(
        r.worst_fp64, max_abs_diff(pka_attention(in64, spec), masked_attention_oracle(in64, spec)));
    ++r.instances;
  }
  r.seconds = seconds_since(t0);
  return r;
}

bool GradcheckReport::passed() const {
  return !entries.empty() && std::all_of(entries.begin(), entries.end(), [&](const auto& e) {
    return e.instances > 0 && e.worst_rel_error <= tolerance;
  });
}

GradcheckReport run_gradcheck(std::size_t instances, std::uint64_t seed) {
  const auto t0 = Clock::now();
  using V = ad::Var<double>;
  using Vars = std::vector<V>;
  GradcheckReport report;
  auto entry = [&](const std::string& name) -> GradcheckEntry& {
    for (auto& e : report.entries) {
      if (e.name == name) return e;
    }
    report.entries.push_back({name, 0, 0.0});
    return report.entries.back();
  };
  auto record = [&](const std::string& name, const ad::FdReport& fd) {
    auto& e = entry(name);
    ++e.instances;
    e.worst_rel_error = std::max(e.worst_rel_error, fd.max_rel_error);
  };

  Rng meta(seed);
  for (std::size_t trial = 0; trial < instances; ++trial) {
    const std::uint64_t probe_seed = meta.next_u64();
    const std::size_t heads = 1 + meta.below(2), d = 2 + meta.below(3), w = heads * d;
    const GridShape grid{2 + meta.below(2), 2 + meta.below(2)};
    const std::size_t n = grid.size(), m = 1 + meta.below(3), s = 1 + meta.below(4);
    const auto qx = random_normal<double>(meta, Shape{n, w});
    const auto kt = random_normal<double>(meta, Shape{m, w}), vt = random_normal<double>(meta, Shape{m, w});
    const auto kc = random_normal<double>(meta, Shape{n, w}), vc = random_normal<double>(meta, Shape{n, w});
    const auto ks = random_normal<double>(meta, Shape{s, w}), vs = random_normal<double>(meta, Shape{s, w});
    const auto active = random_bits(meta, n);
    const std::size_t band_k = 3 + 2 * meta.below(2);

    auto block_case = [&](const std::string& name, KeyPattern cond, bool gated_subject) {
      record(name, ad::fd_check<double>(
                       [&](ad::Tape<double>& t, const Vars& v) {
                         std::vector<ad::KeyBlock<double>> blocks{{v[1], v[2], KeyPattern::full(), "T"},
                                                                  {v[3], v[4], cond, "C"}};
                         if (gated_subject) {
                           blocks.push_back({v[5], v[6], KeyPattern::row_gated(active), "SJ"});
                         }
                         Rng pr(probe_seed);
                         return probe(t, ad::block_attention(v[0], blocks, heads), pr);
                       },
                       {qx, kt, vt, kc, vc, ks, vs}, 1e-5));
    };
    block_case("block_attention/paa", KeyPattern::diagonal(), false);
    block_case("block_attention/ksa", KeyPattern::diagonal(), true);
    block_case("block_attention/band", KeyPattern::band(grid, band_k), false);
    block_case("block_attention/full", KeyPattern::full(), false);

    const std::size_t L = n;
    std::vector<std::uint8_t> allowed(L * L);
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t j = 0; j < L; ++j) allowed[i * L + j] = (i == j) || meta.below(3) != 0;
    }
    record("dense_attention", ad::fd_check<double>(
                                  [&](ad::Tape<double>& t, const Vars& v) {
                                    Rng pr(probe_seed);
                                    return probe(t, ad::dense_attention(v[0], v[1], v[2], heads, &allowed), pr);
                                  },
                                  {qx, kc, vc}, 1e-5));
    record("masked_softmax", ad::fd_check<double>(
                                 [&](ad::Tape<double>& t, const Vars& v) {
                                   Rng pr(probe_seed);
                                   return probe(t, ad::masked_softmax_rows(v[0], allowed), pr);
                                 },
                                 {random_normal<double>(meta, Shape{L, L})}, 1e-5));

    // Whole model loss on a tiny configuration.
    ToyModelConfig cfg;
    cfg.layers = 1 + meta.below(2);
    cfg.heads = heads;
    cfg.head_dim = 2;
    cfg.grid = {2, 2};
    cfg.text_len = 2;
    cfg.vocab = 4;
    cfg.keyword_slot = meta.below(2);
    cfg.subject_len = meta.below(3);
    cfg.subject_dim = 2;
    cfg.mlp_ratio = 1;
    cfg.time_features = 2;
    const ToyDiT<double> model(cfg, meta.next_u64());
    const auto sample = make_dataset<double>(cfg, 1, meta.next_u64())[0];
    const auto noise = random_normal<double>(meta, Shape{cfg.grid.size(), cfg.channels});
    const double t = 0.05 + 0.9 * meta.uniform();
    ForwardOptions<double> fo;
    if (cfg.subject_len > 0) {
      KeywordMask km;
      km.active = random_bits(meta, cfg.grid.size());
      fo.layer_masks.assign(cfg.layers, km);
    }
    record("flow_matching_loss",
           ad::fd_check<double>(
               [&](ad::Tape<double>& tape, const Vars& vars) {
                 return flow_matching_loss(model, tape, vars, sample, t, noise, fo);
               },
               model.params(), 1e-5));
  }
  report.seconds = seconds_since(t0);
  return report;
}

FallbackReport run_fallback_check() {
  FallbackReport r;
  bool forced_ok = true;
  for (const GridShape grid : {GridShape{2, 2}, GridShape{3, 3}, GridShape{2, 5}}) {
    const ModalityLayout layout(2, grid, 1, {3}, {0});
    const std::size_t n = grid.size();
    for (std::size_t bits = 0; bits < (std::size_t{1} << n); ++bits) {
      KeywordMask km;
      km.active.resize(n);
      for (std::size_t i = 0; i < n; ++i) km.active[i] = (bits >> i) & 1u;
      for (auto mode : {MaskMode::kPka, MaskMode::kBand}) {
        const auto spec = build_mask(layout, mode, 3, km);
        for (std::size_t q = 0; q < layout.total_length(); ++q) {
          if (permitted_keys(spec, q).empty()) ++r.empty_rows;
        }
        ++r.masks_checked;
      }
    }
    // Zero queries give uniform scores 1/n, below any threshold near 1, so
    // the mask must fall back to all-active instead of gating everything off.
    Rng rng(n);
    const auto qx = BasicTensor<double>::matrix(n, 4);
    const auto kt = random_normal<double>(rng, Shape{2, 4});
    const auto km = ksa_mask_or_fallback(qx, kt, 2, {0}, 0.99, ScoreNormalization::kSoftmax, 0);
    forced_ok = forced_ok && km.fell_back && km.active_count() == n;
    const auto spec = build_mask(layout, MaskMode::kPka, 1, km);
    for (std::size_t q = 0; q < layout.total_length(); ++q) {
      if (permitted_keys(spec, q).empty()) ++r.empty_rows;
    }
  }
  r.fallback_triggered = forced_ok;
  return r;
}

nlohmann::json to_json(const EquivalenceReport& r) {
  return {{"instances", r.instances},   {"worst_fp32", r.worst_fp32},
          {"worst_fp64", r.worst_fp64}, {"tolerance_fp32", r.tolerance_fp32},
          {"tolerance_fp64", r.tolerance_fp64}, {"seconds", r.seconds},
          {"passed", r.passed()}};
}

nlohmann::json to_json(const GradcheckReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"name", e.name}, {"instances", e.instances}, {"worst_rel_error", e.worst_rel_error}});
  }
  return {{"entries", entries}, {"tolerance", r.tolerance}, {"seconds", r.seconds}, {"passed", r.passed()}};
}

nlohmann::json to_json(const FallbackReport& r) {
  return {{"masks_checked", r.masks_checked},
          {"empty_rows", r.empty_rows},
          {"fallback_triggered", r.fallback_triggered},
          {"passed", r.passed()}};
}

}  // namespace pka
