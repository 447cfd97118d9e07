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

#include "pka/toy_dit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>

#include "pka/errors.hpp"
#include "pka/tensor_io.hpp"

namespace pka {

using ad::Tape;
using ad::Var;

std::string_view to_string(AttentionBackend backend) {
  return backend == AttentionBackend::kSparse ? "sparse" : "dense";
}

AttentionBackend parse_backend(std::string_view name) {
  if (name == "sparse") return AttentionBackend::kSparse;
  if (name == "dense") return AttentionBackend::kDense;
  throw ParameterError("unknown attention backend '" + std::string(name) +
                       "' (expected sparse or dense)");
}

ModalityLayout ToyModelConfig::layout() const {
  std::vector<std::size_t> subjects;
  if (subject_len > 0) subjects.push_back(subject_len);
  return ModalityLayout(text_len, grid, spatial_count, subjects, {keyword_slot});
}

void ToyModelConfig::validate() const {
  if (layers == 0 || heads == 0 || head_dim == 0 || channels == 0 || mlp_ratio == 0) {
    throw ParameterError("layers, heads, head_dim, channels and mlp_ratio must be >= 1");
  }
  if (grid.size() == 0 || grid.size() > 256) {
    throw ParameterError("grid must hold between 1 and 256 cells");
  }
  if (text_len == 0 || vocab == 0) throw ParameterError("text_len and vocab must be >= 1");
  if (keyword_slot >= text_len) throw ParameterError("keyword_slot outside the text");
  if (time_features == 0 || time_features % 2 != 0) {
    throw ParameterError("time_features must be a positive even number");
  }
  if (subject_len > 0 && subject_dim == 0) throw ParameterError("subject_dim must be >= 1");
}

nlohmann::json to_json(const ToyModelConfig& c) {
  return {{"layers", c.layers},
          {"heads", c.heads},
          {"head_dim", c.head_dim},
          {"grid", {c.grid.height, c.grid.width}},
          {"channels", c.channels},
          {"text_len", c.text_len},
          {"vocab", c.vocab},
          {"keyword_slot", c.keyword_slot},
          {"spatial_count", c.spatial_count},
          {"subject_len", c.subject_len},
          {"subject_dim", c.subject_dim},
          {"mlp_ratio", c.mlp_ratio},
          {"time_features", c.time_features}};
}

ToyModelConfig model_config_from_json(const nlohmann::json& j) {
  ToyModelConfig c;
  try {
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.head_dim = j.value("head_dim", c.head_dim);
    if (j.contains("grid")) c.grid = {j.at("grid").at(0), j.at("grid").at(1)};
    c.channels = j.value("channels", c.channels);
    c.text_len = j.value("text_len", c.text_len);
    c.vocab = j.value("vocab", c.vocab);
    c.keyword_slot = j.value("keyword_slot", c.keyword_slot);
    c.spatial_count = j.value("spatial_count", c.spatial_count);
    c.subject_len = j.value("subject_len", c.subject_len);
    c.subject_dim = j.value("subject_dim", c.subject_dim);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.time_features = j.value("time_features", c.time_features);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- data

template <typename T>
BasicTensor<T> derive_condition(const BasicTensor<T>& image) {
  auto out = image;
  for (auto& v : out.data()) v = std::tanh(T{2} * v);
  return out;
}

template <typename T>
SyntheticSample<T> make_sample(const ToyModelConfig& cfg, Rng& rng) {
  const std::size_t H = cfg.grid.height, W = cfg.grid.width, N = cfg.grid.size();
  SyntheticSample<T> s;
  s.image = BasicTensor<T>::full(Shape{N, cfg.channels}, T{-1});
  const std::size_t shapes = 1 + rng.below(2);
  for (std::size_t k = 0; k < shapes; ++k) {
    const std::size_t h = 1 + rng.below(std::max<std::size_t>(H / 2, 1));
    const std::size_t w = 1 + rng.below(std::max<std::size_t>(W / 2, 1));
    const std::size_t r0 = rng.below(H - h + 1), c0 = rng.below(W - w + 1);
    const std::size_t ch = rng.below(cfg.channels);
    for (std::size_t r = r0; r < r0 + h; ++r) {
      for (std::size_t c = c0; c < c0 + w; ++c) s.image(r * W + c, ch) = T{1};
    }
  }
  for (std::size_t j = 0; j < cfg.spatial_count; ++j) s.spatial.push_back(derive_condition(s.image));
  if (cfg.subject_len > 0) {
    s.subject.push_back(random_normal<T>(rng, Shape{cfg.subject_len, cfg.subject_dim}));
  }
  for (std::size_t i = 0; i < cfg.text_len; ++i) s.text.push_back(rng.below(cfg.vocab));
  return s;
}

template <typename T>
std::vector<SyntheticSample<T>> make_dataset(const ToyModelConfig& cfg, std::size_t count,
                                             std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  std::vector<SyntheticSample<T>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_sample<T>(cfg, rng));
  return out;
}

// ---------------------------------------------------------------- model

template <typename T>
ToyDiT<T>::ToyDiT(ToyModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t w = cfg_.width(), N = cfg_.grid.size(), ch = cfg_.channels;
  const std::size_t mw = w * cfg_.mlp_ratio;
  auto add = [&](std::string name, Shape shape, double scale) {
    names_.push_back(std::move(name));
    params_.push_back(random_normal<T>(rng, std::move(shape), scale));
  };
  auto inv = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

  text_table_ = random_normal<T>(rng, Shape{cfg_.vocab, w});
  add("x_embed.w", {ch, w}, inv(ch));
  add("x_embed.b", {w}, 0.0);
  add("pos", {N, w}, 0.5);
  if (cfg_.spatial_count > 0) {
    add("cond_embed.w", {ch, w}, inv(ch));
    add("cond_embed.b", {w}, 0.0);
  }
  if (cfg_.subject_len > 0) {
    add("subj_embed.w", {cfg_.subject_dim, w}, inv(cfg_.subject_dim));
    add("subj_embed.b", {w}, 0.0);
  }
  add("time.w1", {cfg_.time_features, w}, inv(cfg_.time_features));
  add("time.b1", {w}, 0.0);
  add("time.w2", {w, w}, inv(w));
  add("time.b2", {w}, 0.0);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "wq", {w, w}, inv(w));
    add(p + "wk", {w, w}, inv(w));
    add(p + "wv", {w, w}, inv(w));
    add(p + "wo", {w, w}, 0.5 * inv(w));
    add(p + "mlp.w1", {w, mw}, inv(w));
    add(p + "mlp.b1", {mw}, 0.0);
    add(p + "mlp.w2", {mw, w}, 0.5 * inv(mw));
    add(p + "mlp.b2", {w}, 0.0);
  }
  add("out.w", {w, ch}, inv(w));
  add("out.b", {ch}, 0.0);
}

template <typename T>
std::size_t ToyDiT<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

template <typename T>
std::size_t ToyDiT<T>::index_of(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw ParameterError("model has no parameter '" + name + "'");
  return static_cast<std::size_t>(it - names_.begin());
}

template <typename T>
void ToyDiT<T>::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  write_tensor(out, text_table_.template cast<float>());
  for (const auto& p : params_) write_tensor(out, p.template cast<float>());
  if (!out) throw FormatError("write to '" + path + "' failed");
}

template <typename T>
ToyDiT<T> ToyDiT<T>::load(const ToyModelConfig& cfg, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  ToyDiT<T> model(cfg, 0);
  auto next = [&](const BasicTensor<T>& like, const std::string& what) {
    auto t = read_tensor(in).template cast<T>();
    if (t.shape() != like.shape()) {
      throw FormatError("weights file: '" + what + "' has shape " + shape_string(t.shape()) +
                        ", model expects " + shape_string(like.shape()));
    }
    return t;
  };
  model.text_table_ = next(model.text_table_, "text table");
  for (std::size_t i = 0; i < model.params_.size(); ++i) {
    model.params_[i] = next(model.params_[i], model.names_[i]);
  }
  return model;
}

template <typename T>
std::vector<Var<T>> bind_params(const ToyDiT<T>& model, Tape<T>& tape, bool trainable) {
  std::vector<Var<T>> vars;
  vars.reserve(model.params().size());
  for (const auto& p : model.params()) {
    vars.push_back(trainable ? tape.leaf(p) : tape.constant(p));
  }
  return vars;
}

namespace {

template <typename T>
BasicTensor<T> time_features(T t, std::size_t count) {
  auto f = BasicTensor<T>::matrix(1, count);
  for (std::size_t k = 0; k < count / 2; ++k) {
    const T freq = std::numbers::pi_v<T> * static_cast<T>(std::size_t{1} << k);
    f[2 * k] = std::sin(freq * t);
    f[2 * k + 1] = std::cos(freq * t);
  }
  return f;
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return ad::add_bias(ad::matmul(x, w), b);
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const ToyDiT<T>& model, Tape<T>& tape, const std::vector<Var<T>>& params,
                         const BasicTensor<T>& x_t, T t, const SyntheticSample<T>& sample,
                         const ForwardOptions<T>& opt) {
  const auto& cfg = model.config();
  const auto layout = cfg.layout();
  const auto& segs = layout.segments();
  const std::size_t S = segs.size(), w = cfg.width(), N = cfg.grid.size();
  if (params.size() != model.params().size()) {
    throw ContractViolation("forward: parameter list does not match the model");
  }
  if (x_t.shape() != Shape{N, cfg.channels}) {
    throw ContractViolation("forward: x_t must be " + shape_string(Shape{N, cfg.channels}));
  }
  if (sample.spatial.size() != cfg.spatial_count || sample.subject.size() != layout.subject_count() ||
      sample.text.size() != cfg.text_len) {
    throw ContractViolation("forward: sample does not match the model's layout");
  }
  if (!opt.layer_masks.empty() && opt.layer_masks.size() != cfg.layers) {
    throw ContractViolation("forward: need one keyword mask slot per layer");
  }
  auto P = [&](const std::string& name) { return params[model.index_of(name)]; };

  ConditionCache<T>* cache = opt.cache;
  const bool reading = cache && cache->populated();
  const bool filling = cache && !cache->populated();
  if (cache && opt.mask == MaskMode::kDenseFull) {
    throw ParameterError("condition caching needs a pka or band mask; dense-full conditions see X");
  }
  std::map<typename ConditionCache<T>::Key, typename ConditionCache<T>::Entry> fresh;

  // Embeddings.
  std::vector<Var<T>> h(S, Var<T>{});
  {
    auto text = BasicTensor<T>::matrix(cfg.text_len, w);
    for (std::size_t i = 0; i < cfg.text_len; ++i) {
      if (sample.text[i] >= cfg.vocab) throw ParameterError("text id outside the vocabulary");
      write_rows(text, i, slice_rows(model.text_table(), sample.text[i], 1));
    }
    h[0] = tape.constant(std::move(text));

    auto temb = linear(tape.constant(time_features(t, cfg.time_features)), P("time.w1"), P("time.b1"));
    temb = linear(ad::silu(temb), P("time.w2"), P("time.b2"));
    auto x = linear(tape.constant(x_t), P("x_embed.w"), P("x_embed.b"));
    h[1] = ad::add_bias(ad::add(x, P("pos")), temb);
  }
  for (std::size_t s = 2; s < S; ++s) {
    const auto& seg = segs[s];
    if (reading) continue;
    if (seg.kind == SegmentKind::kSpatial) {
      h[s] = ad::add(linear(tape.constant(sample.spatial[seg.index]), P("cond_embed.w"),
                            P("cond_embed.b")),
                     P("pos"));
    } else {
      h[s] = linear(tape.constant(sample.subject[seg.index]), P("subj_embed.w"), P("subj_embed.b"));
    }
  }

  const bool gated_layout = layout.subject_count() > 0 && opt.mask != MaskMode::kDenseFull;
  ForwardResult<T> result;
  if (opt.xsp_attention) opt.xsp_attention->clear();

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    std::optional<KeywordMask> km;
    if (gated_layout && !opt.layer_masks.empty()) km = opt.layer_masks[l];
    const auto spec = build_mask(layout, opt.mask, opt.band_k, km);

    std::vector<Var<T>> q(S), k(S), v(S);
    std::vector<std::uint8_t> computed(S, 0);
    for (std::size_t s = 0; s < S; ++s) {
      if (reading && segs[s].is_condition()) {
        const auto& e = cache->lookup(l, segs[s].name());
        k[s] = tape.constant(e.k);
        v[s] = tape.constant(e.v);
        continue;
      }
      q[s] = ad::matmul(h[s], P(p + "wq"));
      k[s] = ad::matmul(h[s], P(p + "wk"));
      v[s] = ad::matmul(h[s], P(p + "wv"));
      computed[s] = 1;
    }

    if (opt.compute_masks && gated_layout) {
      result.masks.push_back(ksa_mask_or_fallback(q[1].value(), k[0].value(), cfg.heads,
                                                  layout.keywords(), opt.epsilon,
                                                  opt.normalization, opt.step));
    }
    if (opt.xsp_attention && cfg.spatial_count > 0) {
      const std::size_t sp = layout.segment_index_of(layout.spatial(0).offset);
      std::vector<BasicTensor<double>> heads;
      const std::size_t d = cfg.head_dim;
      for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
        auto logits = matmul_nt(slice_cols(q[1].value(), hd * d, d),
                                slice_cols(k[sp].value(), hd * d, d))
                          .template cast<double>();
        for (auto& x : logits.data()) x /= std::sqrt(static_cast<double>(d));
        heads.push_back(softmax_rows(logits));
      }
      opt.xsp_attention->push_back(std::move(heads));
    }

    std::vector<Var<T>> next(S);
    for (std::size_t qs = 0; qs < S; ++qs) {
      if (!computed[qs]) continue;
      Var<T> attn;
      if (opt.backend == AttentionBackend::kSparse) {
        std::vector<ad::KeyBlock<T>> blocks;
        for (std::size_t ks = 0; ks < S; ++ks) {
          if (spec.rule(qs, ks).kind == BlockRuleKind::kNone) continue;
          blocks.push_back({k[ks], v[ks], pattern_for(spec, qs, ks), segs[ks].name()});
        }
        attn = ad::block_attention(q[qs], blocks, cfg.heads, opt.counters, segs[qs].name());
      } else {
        const std::size_t L = layout.total_length();
        std::vector<std::uint8_t> allowed(segs[qs].length * L);
        for (std::size_t i = 0; i < segs[qs].length; ++i) {
          for (std::size_t j = 0; j < L; ++j) allowed[i * L + j] = spec.permits(segs[qs].offset + i, j);
        }
        attn = ad::dense_attention(q[qs], ad::concat_rows(k), ad::concat_rows(v), cfg.heads, &allowed);
      }
      auto x = ad::add(h[qs], ad::matmul(attn, P(p + "wo")));
      auto m = linear(ad::silu(linear(x, P(p + "mlp.w1"), P(p + "mlp.b1"))), P(p + "mlp.w2"),
                      P(p + "mlp.b2"));
      next[qs] = ad::add(x, m);
      if (filling && segs[qs].is_condition()) {
        fresh[{l, segs[qs].name()}] = {k[qs].value(), v[qs].value(), next[qs].value()};
      }
    }
    h = std::move(next);
  }

  if (filling) cache->populate(opt.step, std::move(fresh));
  result.velocity = linear(h[1], P("out.w"), P("out.b"));
  return result;
}

template <typename T>
BasicTensor<T> interpolate(const BasicTensor<T>& data, const BasicTensor<T>& noise, T t) {
  if (data.shape() != noise.shape()) throw ContractViolation("interpolate: shape mismatch");
  auto out = data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (T{1} - t) * data[i] + t * noise[i];
  return out;
}

template <typename T>
BasicTensor<T> velocity_target(const BasicTensor<T>& data, const BasicTensor<T>& noise) {
  if (data.shape() != noise.shape()) throw ContractViolation("velocity_target: shape mismatch");
  auto out = noise;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= data[i];
  return out;
}

template <typename T>
Var<T> flow_matching_loss(const ToyDiT<T>& model, Tape<T>& tape, const std::vector<Var<T>>& params,
                          const SyntheticSample<T>& sample, T t, const BasicTensor<T>& noise,
                          const ForwardOptions<T>& options) {
  if (!(t > T{0} && t < T{1})) throw DomainError("flow matching needs t in (0, 1)");
  const auto x_t = interpolate(sample.image, noise, t);
  const auto pred = forward(model, tape, params, x_t, t, sample, options).velocity;
  return ad::mse(pred, tape.constant(velocity_target(sample.image, noise)));
}

// ---------------------------------------------------------------- sampling

template <typename T>
DenoiseResult<T> denoise(const ToyDiT<T>& model, const SyntheticSample<T>& conditions,
                         const BasicTensor<T>& noise, const DenoiseOptions& o) {
  if (o.steps == 0) throw ParameterError("denoise needs at least one step");
  const auto& cfg = model.config();
  const auto layout = cfg.layout();
  const bool gating =
      o.keyword_gating && layout.subject_count() > 0 && o.mask != MaskMode::kDenseFull;
  if (o.use_cache && o.mask == MaskMode::kDenseFull) {
    throw ParameterError("condition caching needs a pka or band mask");
  }

  DenoiseResult<T> r;
  ConditionCache<T> cache;
  std::vector<std::optional<KeywordMask>> applied(cfg.layers);
  auto x = noise;
  const T dt = T{1} / static_cast<T>(o.steps);
  for (std::size_t i = 0; i < o.steps; ++i) {
    const T t = T{1} - static_cast<T>(i) * dt;
    Tape<T> tape;
    const auto params = bind_params(model, tape, false);
    ForwardOptions<T> fo;
    fo.mask = o.mask;
    fo.band_k = o.band_k;
    fo.backend = o.backend;
    if (gating) fo.layer_masks = applied;
    fo.compute_masks = gating;
    fo.epsilon = o.epsilon;
    fo.normalization = o.normalization;
    fo.step = static_cast<int>(i);
    fo.cache = o.use_cache ? &cache : nullptr;

    StepTrace st;
    st.step = static_cast<int>(i);
    st.t = static_cast<double>(t);
    st.cache_hit = o.use_cache && cache.populated();
    const auto out = forward(model, tape, params, x, t, conditions, fo);

    std::vector<KeywordMask> used;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      st.applied_mask_step.push_back(gating && applied[l] ? applied[l]->step : -1);
      if (gating && applied[l]) used.push_back(*applied[l]);
      if (l < out.masks.size()) {
        st.computed_mask_step.push_back(out.masks[l].step);
        st.active.push_back(out.masks[l].active_count());
        st.fell_back.push_back(out.masks[l].fell_back ? 1 : 0);
      } else {
        st.computed_mask_step.push_back(-1);
      }
    }
    r.applied_masks.push_back(std::move(used));
    r.computed_masks.push_back(out.masks);
    r.trace.push_back(std::move(st));

    const auto& vel = out.velocity.value();
    for (std::size_t e = 0; e < x.size(); ++e) x[e] -= dt * vel[e];
    if (gating) {
      for (std::size_t l = 0; l < cfg.layers; ++l) applied[l] = out.masks[l];
    }
  }
  r.image = std::move(x);
  r.cache_bytes = cache.memory_bytes();
  return r;
}

nlohmann::json to_json(const StepTrace& s) {
  std::vector<int> fell(s.fell_back.begin(), s.fell_back.end());
  return {{"step", s.step},
          {"t", s.t},
          {"applied_mask_step", s.applied_mask_step},
          {"computed_mask_step", s.computed_mask_step},
          {"active", s.active},
          {"fell_back", fell},
          {"cache_hit", s.cache_hit}};
}

// ---------------------------------------------------------------- training

template <typename T>
void Adam::step(std::vector<BasicTensor<T>>& params, const std::vector<BasicTensor<T>>& grads) {
  if (params.size() != grads.size()) throw ContractViolation("Adam: gradient count mismatch");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size()) throw ContractViolation("Adam: shape mismatch");
    for (std::size_t e = 0; e < params[i].size(); ++e) {
      const double g = static_cast<double>(grads[i][e]);
      m_[i][e] = beta1_ * m_[i][e] + (1 - beta1_) * g;
      v_[i][e] = beta2_ * v_[i][e] + (1 - beta2_) * g * g;
      const double update = lr_ * (m_[i][e] / c1) / (std::sqrt(v_[i][e] / c2) + eps_);
      params[i][e] = static_cast<T>(static_cast<double>(params[i][e]) - update);
    }
  }
}

template void Adam::step(std::vector<Tensor>&, const std::vector<Tensor>&);
template void Adam::step(std::vector<Tensor64>&, const std::vector<Tensor64>&);

nlohmann::json to_json(const TrainConfig& c) {
  return {{"model", to_json(c.model)},
          {"sampler", {{"preset", c.sampler.name}, {"mu", c.sampler.mu}, {"sigma", c.sampler.sigma}}},
          {"mask", to_string(c.mask)},
          {"backend", to_string(c.backend)},
          {"iterations", c.iterations},
          {"batch", c.batch},
          {"dataset_size", c.dataset_size},
          {"learning_rate", c.learning_rate},
          {"cosine_decay", c.cosine_decay},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed},
          {"eval_every", c.eval_every},
          {"eval_samples", c.eval_samples},
          {"eval_steps", c.eval_steps},
          {"loss_eval_pairs", c.loss_eval_pairs}};
}

namespace {

enum Stream : std::uint64_t { kInit = 0, kData, kBatch, kNoise, kTime, kEvalLoss, kEvalNoise };

ForwardOptions<float> training_options(const TrainConfig& cfg) {
  ForwardOptions<float> fo;
  fo.mask = cfg.mask;
  fo.backend = cfg.backend;
  return fo;
}

}  // namespace

double evaluation_loss(const ToyDiT<float>& model, const TrainConfig& cfg) {
  const Rng root(cfg.seed);
  const auto data = make_dataset<float>(cfg.model, cfg.dataset_size, root.split(kData).next_u64());
  Rng rng = root.split(kEvalLoss);
  const auto fo = training_options(cfg);
  const std::size_t N = cfg.model.grid.size();
  double total = 0;
  for (std::size_t i = 0; i < cfg.loss_eval_pairs; ++i) {
    const auto& s = data[i % data.size()];
    // Stratified t so every sampler is scored on the same grid.
    const float t = static_cast<float>((static_cast<double>(i) + 0.5) /
                                       static_cast<double>(cfg.loss_eval_pairs));
    const auto noise = random_normal<float>(rng, Shape{N, cfg.model.channels});
    Tape<float> tape;
    const auto params = bind_params(model, tape, false);
    total += flow_matching_loss(model, tape, params, s, t, noise, fo).value()[0];
  }
  return total / static_cast<double>(cfg.loss_eval_pairs);
}

double reconstruction_mse(const ToyDiT<float>& model, const TrainConfig& cfg) {
  if (cfg.model.spatial_count == 0) throw ParameterError("reconstruction needs a spatial condition");
  const Rng root(cfg.seed);
  const auto data = make_dataset<float>(cfg.model, cfg.dataset_size, root.split(kData).next_u64());
  Rng rng = root.split(kEvalNoise);
  DenoiseOptions o;
  o.steps = cfg.eval_steps;
  o.mask = cfg.mask;
  o.backend = cfg.backend;
  o.use_cache = cfg.mask != MaskMode::kDenseFull;
  o.keyword_gating = false;
  const std::size_t count = std::min(cfg.eval_samples, data.size());
  double total = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const auto noise = random_normal<float>(rng, Shape{cfg.model.grid.size(), cfg.model.channels});
    const auto out = denoise(model, data[i], noise, o);
    const auto derived = derive_condition(out.image);
    double se = 0;
    for (std::size_t e = 0; e < derived.size(); ++e) {
      const double diff = derived[e] - data[i].spatial[0][e];
      se += diff * diff;
    }
    total += se / static_cast<double>(derived.size());
  }
  return total / static_cast<double>(count);
}

TrainResult train(const TrainConfig& cfg, const std::function<void(const TraceRow&)>& on_row) {
  cfg.model.validate();
  cfg.sampler.validate();
  if (cfg.batch == 0 || cfg.dataset_size == 0 || cfg.loss_eval_pairs == 0) {
    throw ParameterError("batch, dataset_size and loss_eval_pairs must be >= 1");
  }
  if (!(cfg.learning_rate > 0)) throw ParameterError("learning rate must be positive");

  const Rng root(cfg.seed);
  TrainResult r{ToyDiT<float>(cfg.model, root.split(kInit).next_u64()), {}, 0, 0, 0, {}};
  auto& model = r.model;
  const auto data = make_dataset<float>(cfg.model, cfg.dataset_size, root.split(kData).next_u64());
  Rng batch_rng = root.split(kBatch), noise_rng = root.split(kNoise), t_rng = root.split(kTime);
  const auto fo = training_options(cfg);
  const std::size_t N = cfg.model.grid.size();
  Adam adam(cfg.learning_rate);

  r.initial_eval_loss = evaluation_loss(model, cfg);
  auto dump = [&](const std::string& why) {
    nlohmann::json rows = nlohmann::json::array();
    const std::size_t from = r.trace.size() > 10 ? r.trace.size() - 10 : 0;
    for (std::size_t i = from; i < r.trace.size(); ++i) {
      rows.push_back({{"iteration", r.trace[i].iteration}, {"loss", r.trace[i].loss}});
    }
    return TrainingError(why + "; last trace rows: " + rows.dump());
  };

  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    Tape<float> tape;
    const auto params = bind_params(model, tape, true);
    std::vector<Var<float>> losses;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& s = data[batch_rng.below(data.size())];
      double t = sample_t(t_rng, cfg.sampler, 1)[0];
      t = std::clamp(t, 1e-6, 1.0 - 1e-6);
      r.timesteps.push_back(t);
      const auto noise = random_normal<float>(noise_rng, Shape{N, cfg.model.channels});
      losses.push_back(flow_matching_loss(model, tape, params, s, static_cast<float>(t), noise, fo));
    }
    auto loss = losses.front();
    for (std::size_t b = 1; b < losses.size(); ++b) loss = ad::add(loss, losses[b]);
    loss = ad::scale(loss, 1.0f / static_cast<float>(cfg.batch));
    const double value = loss.value()[0];
    if (!std::isfinite(value)) throw dump("non-finite loss at iteration " + std::to_string(it));

    auto grads = tape.grad(loss, params);
    if (cfg.grad_clip > 0) {
      double norm2 = 0;
      for (const auto& g : grads) {
        for (float x : g.data()) norm2 += static_cast<double>(x) * x;
      }
      const double norm = std::sqrt(norm2);
      if (!std::isfinite(norm)) throw dump("non-finite gradient at iteration " + std::to_string(it));
      if (norm > cfg.grad_clip) {
        const auto f = static_cast<float>(cfg.grad_clip / norm);
        for (auto& g : grads) {
          for (auto& x : g.data()) x *= f;
        }
      }
    }
    if (cfg.cosine_decay) {
      const double progress = static_cast<double>(it - 1) / static_cast<double>(cfg.iterations);
      adam.set_learning_rate(0.5 * cfg.learning_rate * (1.0 + std::cos(std::numbers::pi * progress)));
    }
    adam.step(model.params(), grads);

    TraceRow row{it, value, std::nullopt, std::nullopt};
    if ((cfg.eval_every > 0 && it % cfg.eval_every == 0) || it == cfg.iterations) {
      row.eval_loss = evaluation_loss(model, cfg);
      if (cfg.model.spatial_count > 0 && cfg.eval_samples > 0) {
        row.recon_mse = reconstruction_mse(model, cfg);
      }
    }
    r.trace.push_back(row);
    if (on_row) on_row(row);
  }

  if (cfg.iterations == 0) {
    r.final_eval_loss = r.initial_eval_loss;
    if (cfg.model.spatial_count > 0 && cfg.eval_samples > 0) {
      r.final_recon_mse = reconstruction_mse(model, cfg);
    }
  } else {
    r.final_eval_loss = *r.trace.back().eval_loss;
    r.final_recon_mse = r.trace.back().recon_mse.value_or(0.0);
  }
  return r;
}

#define PKA_TOY_INSTANTIATE(T)                                                              \
  template BasicTensor<T> derive_condition(const BasicTensor<T>&);                          \
  template SyntheticSample<T> make_sample(const ToyModelConfig&, Rng&);                     \
  template std::vector<SyntheticSample<T>> make_dataset(const ToyModelConfig&, std::size_t, \
                                                        std::uint64_t);                     \
  template class ToyDiT<T>;                                                                 \
  template std::vector<Var<T>> bind_params(const ToyDiT<T>&, Tape<T>&, bool);               \
  template ForwardResult<T> forward(const ToyDiT<T>&, Tape<T>&, const std::vector<Var<T>>&, \
                                    const BasicTensor<T>&, T, const SyntheticSample<T>&,    \
                                    const ForwardOptions<T>&);                              \
  template BasicTensor<T> interpolate(const BasicTensor<T>&, const BasicTensor<T>&, T);     \
  template BasicTensor<T> velocity_target(const BasicTensor<T>&, const BasicTensor<T>&);    \
  template Var<T> flow_matching_loss(const ToyDiT<T>&, Tape<T>&, const std::vector<Var<T>>&, \
                                     const SyntheticSample<T>&, T, const BasicTensor<T>&,   \
                                     const ForwardOptions<T>&);                             \
  template DenoiseResult<T> denoise(const ToyDiT<T>&, const SyntheticSample<T>&,            \
                                    const BasicTensor<T>&, const DenoiseOptions&);

PKA_TOY_INSTANTIATE(float)
PKA_TOY_INSTANTIATE(double)

}  // namespace pka
