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

// A small multi-condition diffusion transformer over synthetic grids,
// trained with flow matching. Conventions: t = 1 is noise, x_t = (1 - t) x +
// t e, target velocity e - x.
//
// Token groups follow ModalityLayout order: T (frozen text embeddings), X
// (noisy image, with position and time embeddings), SP_j (spatial maps, same
// position embedding as X), SJ_j (subject patches). Condition tokens carry no
// time embedding, so under a pka or band mask their whole branch is
// independent of t and can be cached.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pka/attention_ops.hpp"
#include "pka/autodiff.hpp"
#include "pka/condition_cache.hpp"
#include "pka/counters.hpp"
#include "pka/keyword_mask.hpp"
#include "pka/layout.hpp"
#include "pka/rng.hpp"
#include "pka/sampler.hpp"

namespace pka {

enum class AttentionBackend {
  kSparse,  // block kernels with streaming merge
  kDense,   // masked dense softmax per query segment
};

std::string_view to_string(AttentionBackend backend);
AttentionBackend parse_backend(std::string_view name);

struct ToyModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t head_dim = 8;
  GridShape grid{8, 8};
  std::size_t channels = 1;
  std::size_t text_len = 4;
  std::size_t vocab = 16;
  std::size_t keyword_slot = 1;
  std::size_t spatial_count = 1;
  std::size_t subject_len = 0;  // 0: no subject condition
  std::size_t subject_dim = 4;
  std::size_t mlp_ratio = 2;
  std::size_t time_features = 8;

  std::size_t width() const { return heads * head_dim; }
  ModalityLayout layout() const;
  void validate() const;
};

nlohmann::json to_json(const ToyModelConfig& cfg);
ToyModelConfig model_config_from_json(const nlohmann::json& j);

template <typename T>
struct SyntheticSample {
  BasicTensor<T> image;                  // N x ch, background -1, shapes +1
  std::vector<BasicTensor<T>> spatial;   // derive_condition(image), one per SP
  std::vector<BasicTensor<T>> subject;   // n_sj x subject_dim
  std::vector<std::size_t> text;         // vocabulary ids, length M

  template <typename U>
  SyntheticSample<U> cast() const {
    SyntheticSample<U> s;
    s.image = image.template cast<U>();
    for (const auto& m : spatial) s.spatial.push_back(m.template cast<U>());
    for (const auto& m : subject) s.subject.push_back(m.template cast<U>());
    s.text = text;
    return s;
  }
};

// Soft shape map tanh(2x), applied element-wise.
template <typename T>
BasicTensor<T> derive_condition(const BasicTensor<T>& image);

template <typename T>
SyntheticSample<T> make_sample(const ToyModelConfig& cfg, Rng& rng);

template <typename T>
std::vector<SyntheticSample<T>> make_dataset(const ToyModelConfig& cfg, std::size_t count,
                                             std::uint64_t seed);

template <typename T>
class ToyDiT {
 public:
  ToyDiT(ToyModelConfig cfg, std::uint64_t seed);

  const ToyModelConfig& config() const noexcept { return cfg_; }
  const std::vector<std::string>& names() const noexcept { return names_; }
  std::vector<BasicTensor<T>>& params() noexcept { return params_; }
  const std::vector<BasicTensor<T>>& params() const noexcept { return params_; }
  const BasicTensor<T>& text_table() const noexcept { return text_table_; }
  std::size_t parameter_count() const;
  std::size_t index_of(const std::string& name) const;

  template <typename U>
  ToyDiT<U> cast() const {
    ToyDiT<U> out(cfg_, 0);
    for (std::size_t i = 0; i < params_.size(); ++i) out.params()[i] = params_[i].template cast<U>();
    out.set_text_table(text_table_.template cast<U>());
    return out;
  }
  void set_text_table(BasicTensor<T> table) { text_table_ = std::move(table); }

  // Frozen text table first, then parameters in name order, as consecutive
  // tensor records.
  void save(const std::string& path) const;
  static ToyDiT load(const ToyModelConfig& cfg, const std::string& path);

 private:
  ToyModelConfig cfg_;
  std::vector<std::string> names_;
  std::vector<BasicTensor<T>> params_;
  BasicTensor<T> text_table_;
};

template <typename T>
struct ForwardOptions {
  MaskMode mask = MaskMode::kPka;
  std::size_t band_k = 1;
  AttentionBackend backend = AttentionBackend::kSparse;
  // Keyword mask to apply per layer (nullopt: X->SJ ungated).
  std::vector<std::optional<KeywordMask>> layer_masks;
  // Compute the next step's keyword mask per layer from this pass.
  bool compute_masks = false;
  double epsilon = 0.2;
  ScoreNormalization normalization = ScoreNormalization::kSoftmax;
  int step = -1;
  // Read condition K/V from a populated cache, or fill an empty one.
  ConditionCache<T>* cache = nullptr;
  CostCounters* counters = nullptr;
  // When set, receives per layer and head the X->SP0 attention renormalized
  // over the SP0 keys (N x N).
  std::vector<std::vector<BasicTensor<double>>>* xsp_attention = nullptr;
};

template <typename T>
struct ForwardResult {
  ad::Var<T> velocity;            // N x ch
  std::vector<KeywordMask> masks;  // per layer, when compute_masks
};

// Binds the model parameters onto `tape` as leaves (trainable) or constants.
template <typename T>
std::vector<ad::Var<T>> bind_params(const ToyDiT<T>& model, ad::Tape<T>& tape, bool trainable);

template <typename T>
ForwardResult<T> forward(const ToyDiT<T>& model, ad::Tape<T>& tape,
                         const std::vector<ad::Var<T>>& params, const BasicTensor<T>& x_t,
                         T t, const SyntheticSample<T>& sample,
                         const ForwardOptions<T>& options);

// (1 - t) data + t noise and noise - data.
template <typename T>
BasicTensor<T> interpolate(const BasicTensor<T>& data, const BasicTensor<T>& noise, T t);
template <typename T>
BasicTensor<T> velocity_target(const BasicTensor<T>& data, const BasicTensor<T>& noise);

// Mean squared error between the predicted velocity at x_t and noise - data.
template <typename T>
ad::Var<T> flow_matching_loss(const ToyDiT<T>& model, ad::Tape<T>& tape,
                              const std::vector<ad::Var<T>>& params,
                              const SyntheticSample<T>& sample, T t,
                              const BasicTensor<T>& noise, const ForwardOptions<T>& options);

struct DenoiseOptions {
  std::size_t steps = 28;
  bool use_cache = true;
  MaskMode mask = MaskMode::kPka;
  std::size_t band_k = 1;
  AttentionBackend backend = AttentionBackend::kSparse;
  // Keyword gating of X->SJ from the previous step's affinity.
  bool keyword_gating = true;
  double epsilon = 0.2;
  ScoreNormalization normalization = ScoreNormalization::kSoftmax;
};

struct StepTrace {
  int step = 0;
  double t = 0.0;
  std::vector<int> applied_mask_step;   // per layer; -1 when X->SJ ran ungated
  std::vector<int> computed_mask_step;  // per layer; -1 when nothing computed
  std::vector<std::size_t> active;      // active tokens of the computed masks
  std::vector<std::uint8_t> fell_back;
  bool cache_hit = false;
};

template <typename T>
struct DenoiseResult {
  BasicTensor<T> image;
  std::vector<StepTrace> trace;
  std::vector<std::vector<KeywordMask>> applied_masks;   // per step, per layer
  std::vector<std::vector<KeywordMask>> computed_masks;  // per step, per layer
  std::size_t cache_bytes = 0;
};

// Euler integration from t = 1 to t = 0 over uniform steps, starting at
// `noise`.
template <typename T>
DenoiseResult<T> denoise(const ToyDiT<T>& model, const SyntheticSample<T>& conditions,
                         const BasicTensor<T>& noise, const DenoiseOptions& options);

nlohmann::json to_json(const StepTrace& s);

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  template <typename T>
  void step(std::vector<BasicTensor<T>>& params, const std::vector<BasicTensor<T>>& grads);

  std::size_t steps() const noexcept { return t_; }
  double learning_rate() const noexcept { return lr_; }
  void set_learning_rate(double lr) noexcept { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
  ToyModelConfig model;
  SamplerConfig sampler = SamplerConfig::csas();
  MaskMode mask = MaskMode::kPka;
  AttentionBackend backend = AttentionBackend::kSparse;
  std::size_t iterations = 1000;
  std::size_t batch = 4;
  std::size_t dataset_size = 16;
  double learning_rate = 3e-3;
  // Cosine decay from learning_rate to 0 over the run; constant otherwise.
  bool cosine_decay = false;
  double grad_clip = 1.0;  // global norm; 0 disables
  std::uint64_t seed = 0;
  std::size_t eval_every = 250;
  std::size_t eval_samples = 8;
  std::size_t eval_steps = 10;
  std::size_t loss_eval_pairs = 32;
};

nlohmann::json to_json(const TrainConfig& cfg);

struct TraceRow {
  std::size_t iteration = 0;
  double loss = 0.0;
  std::optional<double> eval_loss;
  std::optional<double> recon_mse;
};

struct TrainResult {
  ToyDiT<float> model;
  std::vector<TraceRow> trace;
  double initial_eval_loss = 0.0;
  double final_eval_loss = 0.0;
  double final_recon_mse = 0.0;
  std::vector<double> timesteps;  // every t drawn, in order
};

// Deterministic in cfg. Streams split from cfg.seed: parameters, data,
// minibatch indices, noise and timesteps are drawn independently, so two
// runs differing only in the sampler see the same data, noise and the same
// underlying normal draws for t. Raises TrainingError on a non-finite loss;
// `on_row` sees every trace row as it is produced.
TrainResult train(const TrainConfig& cfg,
                  const std::function<void(const TraceRow&)>& on_row = {});

// Fixed (sample, t, noise) triples scored with the given mask/backend.
double evaluation_loss(const ToyDiT<float>& model, const TrainConfig& cfg);

// Mean over the first eval_samples data items of
// mse(derive_condition(generated), spatial condition), generating with
// eval_steps Euler steps from fixed noise.
double reconstruction_mse(const ToyDiT<float>& model, const TrainConfig& cfg);

}  // namespace pka
