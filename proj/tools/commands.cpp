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

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cli.hpp"
#include "cli_internal.hpp"
#include "pka/attention_dense.hpp"
#include "pka/attention_sparse.hpp"
#include "pka/cost_model.hpp"
#include "pka/redundancy.hpp"
#include "pka/sampler.hpp"
#include "pka/tensor_io.hpp"
#include "pka/toy_dit.hpp"
#include "pka/verify.hpp"

namespace pka::cli {

namespace {

const std::vector<std::string> kMaskNames{"pka", "band", "dense", "dense-full"};

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "' is not valid JSON: " + e.what());
  }
}

std::string csv_comment(const nlohmann::json& header) { return "# " + header.dump() + "\n"; }

template <typename T>
AttentionInputs<T> random_inputs(Rng& rng, std::size_t L, std::size_t heads, std::size_t d) {
  AttentionInputs<T> in;
  in.q = random_normal<T>(rng, Shape{L, heads * d});
  in.k = random_normal<T>(rng, Shape{L, heads * d});
  in.v = random_normal<T>(rng, Shape{L, heads * d});
  in.heads = heads;
  return in;
}

}  // namespace

// ------------------------------------------------------------------ verify

Command add_verify(CLI::App& app) {
  struct Opts {
    std::uint64_t seed = 2025;
    std::size_t instances = 200;
    std::string mask;
    std::size_t heads = 4, head_dim = 16;
    std::string out;
  };
  auto o = std::make_shared<Opts>();
  auto* sub = app.add_subcommand("verify", "Sparse engine against the dense masked oracle");
  sub->configurable();
  sub->add_option("--seed", o->seed, "Seed of the instance generator")->capture_default_str();
  sub->add_option("--instances", o->instances, "Number of seeded instances")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub->add_option("--mask", o->mask, "Mask spec JSON to check instead of random layouts")
      ->check(CLI::ExistingFile);
  sub->add_option("--heads", o->heads, "Heads, with --mask")->capture_default_str();
  sub->add_option("--head-dim", o->head_dim, "Head width, with --mask")->capture_default_str();
  sub->add_option("--out", o->out, "Output JSON path (default stdout)");

  return {sub, "verify", [o](Context& ctx) {
            EquivalenceReport r;
            nlohmann::json config{{"seed", o->seed}, {"instances", o->instances}};
            if (!o->mask.empty()) {
              const auto spec = mask_from_json(read_json_file(o->mask));
              config["mask"] = to_json(spec);
              config["heads"] = o->heads;
              config["head_dim"] = o->head_dim;
              Rng meta(o->seed);
              const std::size_t L = spec.layout().total_length();
              for (std::size_t i = 0; i < o->instances; ++i) {
                const auto draw = meta.next_u64();
                Rng r32(draw), r64(draw);
                const auto in32 = random_inputs<float>(r32, L, o->heads, o->head_dim);
                const auto in64 = random_inputs<double>(r64, L, o->heads, o->head_dim);
                r.worst_fp32 = std::max(r.worst_fp32,
                                        static_cast<double>(max_abs_diff(
                                            pka_attention(in32, spec), masked_attention_oracle(in32, spec))));
                r.worst_fp64 = std::max(
                    r.worst_fp64, max_abs_diff(pka_attention(in64, spec), masked_attention_oracle(in64, spec)));
                ++r.instances;
              }
            } else {
              r = run_equivalence(o->instances, o->seed);
            }
            auto doc = ctx.header(config);
            doc["instances"] = r.instances;
            doc["max_abs_err"] = r.worst_fp32;
            doc["max_abs_err_fp64"] = r.worst_fp64;
            doc["tolerance"] = {{"fp32", r.tolerance_fp32}, {"fp64", r.tolerance_fp64}};
            doc["pass"] = r.passed();
            ctx.emit(o->out, doc.dump(2) + "\n");
            if (!r.passed()) throw InvariantBreach("sparse engine disagrees with the oracle", doc);
            return kOk;
          }};
}

// --------------------------------------------------------------- gradcheck

Command add_gradcheck(CLI::App& app) {
  struct Opts {
    std::uint64_t seed = 7;
    std::size_t instances = 20;
    std::string out;
  };
  auto o = std::make_shared<Opts>();
  auto* sub = app.add_subcommand("gradcheck", "fp64 finite-difference checks of every kernel and the loss");
  sub->configurable();
  sub->add_option("--seed", o->seed, "Seed")->capture_default_str();
  sub->add_option("--instances", o->instances, "Instances per kernel")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub->add_option("--out", o->out, "Output JSON path (default stdout)");
  return {sub, "gradcheck", [o](Context& ctx) {
            const auto r = run_gradcheck(o->instances, o->seed);
            auto doc = ctx.header({{"seed", o->seed}, {"instances", o->instances}});
            const auto body = to_json(r);
            doc["kernels"] = body.at("entries");
            doc["tolerance"] = r.tolerance;
            doc["pass"] = r.passed();
            ctx.emit(o->out, doc.dump(2) + "\n");
            if (!r.passed()) throw InvariantBreach("gradient check failed", doc);
            return kOk;
          }};
}

// ------------------------------------------------------------------- bench

Command add_bench(CLI::App& app) {
  struct Opts {
    std::string kind = "spatial";
    std::string grid = "8x8";
    std::size_t text_len = 8;
    std::vector<std::size_t> conditions{1, 2, 4, 8, 16};
    std::size_t tokens_per_cond = 64;
    std::vector<std::string> modes{"dense", "pka"};
    std::size_t band_k = 3;
    std::size_t heads = 4, head_dim = 32;
    std::string layout;
    bool timing = false;
    std::size_t repeats = 3;
    std::uint64_t seed = 0;
    std::string out, report;
  };
  auto o = std::make_shared<Opts>();
  auto* bench = app.add_subcommand("bench", "Cost benchmarks");
  bench->require_subcommand(1);
  auto* sub = bench->add_subcommand("scaling", "Score entries, FLOPs and bytes against condition count");
  sub->configurable();
  sub->add_option("--kind", o->kind, "Condition kind added per step")
      ->capture_default_str()
      ->check(CLI::IsMember({"spatial", "subject"}));
  sub->add_option("--grid", o->grid, "Image grid HxW")->capture_default_str();
  sub->add_option("--text-len", o->text_len, "Text tokens")->capture_default_str();
  sub->add_option("--conditions", o->conditions, "Condition counts")
      ->delimiter(',')
      ->capture_default_str();
  sub->add_option("--tokens-per-cond", o->tokens_per_cond,
                  "Tokens per condition (spatial conditions must match the grid)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub->add_option("--mode", o->modes, "Masks to compare")
      ->delimiter(',')
      ->capture_default_str()
      ->check(CLI::IsMember(kMaskNames));
  sub->add_option("--band-k", o->band_k, "Band window side")->capture_default_str();
  sub->add_option("--heads", o->heads, "Heads")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--head-dim", o->head_dim, "Head width")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--layout", o->layout, "Base layout JSON; conditions are added on top")
      ->check(CLI::ExistingFile);
  sub->add_flag("--timing", o->timing, "Run the kernels and record wall time (counters are cross-checked)");
  sub->add_option("--repeats", o->repeats, "Timed repeats, fastest kept")->capture_default_str();
  sub->add_option("--seed", o->seed, "Seed for timed inputs")->capture_default_str();
  sub->add_option("--out", o->out, "CSV path (default stdout)");
  sub->add_option("--report", o->report, "JSON path for per-row first and cached step reports");

  return {sub, "bench scaling", [o](Context& ctx) {
            std::size_t text_len = o->text_len;
            GridShape grid = parse_grid(o->grid);
            std::vector<std::size_t> base_subjects;
            std::size_t base_spatial = 0;
            std::vector<std::size_t> keywords{0};
            if (!o->layout.empty()) {
              const auto base = layout_from_json(read_json_file(o->layout));
              text_len = base.text_len();
              grid = base.grid();
              base_spatial = base.spatial_count();
              base_subjects = base.subject_lengths();
              keywords = base.keywords();
            }
            if (o->kind == "spatial" && o->tokens_per_cond != grid.size()) {
              throw UsageError("spatial conditions have one token per grid cell: --tokens-per-cond must be " +
                               std::to_string(grid.size()));
            }
            auto conditions = o->conditions;
            std::sort(conditions.begin(), conditions.end());
            conditions.erase(std::unique(conditions.begin(), conditions.end()), conditions.end());

            nlohmann::json config{{"kind", o->kind},       {"grid", {grid.height, grid.width}},
                                  {"text_len", text_len},   {"conditions", conditions},
                                  {"tokens_per_cond", o->tokens_per_cond}, {"modes", o->modes},
                                  {"band_k", o->band_k},    {"heads", o->heads},
                                  {"head_dim", o->head_dim}, {"timing", o->timing},
                                  {"repeats", o->repeats},  {"seed", o->seed}};
            if (!o->layout.empty()) config["layout"] = read_json_file(o->layout);
            const auto header = ctx.header(config);

            std::ostringstream csv;
            csv << csv_comment(header);
            csv << "mode,c,entries,flops,bytes,wall_ns,projection_flops,peak_bytes\n";
            nlohmann::json rows = nlohmann::json::array();
            nlohmann::json slopes = nlohmann::json::object();
            for (const auto& mode_name : o->modes) {
              const auto mode = parse_mask_mode(mode_name);
              std::vector<double> cs, entries;
              for (std::size_t c : conditions) {
                std::size_t spatial = base_spatial;
                auto subjects = base_subjects;
                if (o->kind == "spatial") spatial += c;
                else subjects.insert(subjects.end(), c, o->tokens_per_cond);
                const ModalityLayout layout(text_len, grid, spatial, subjects, keywords);
                const auto spec = build_mask(layout, mode, o->band_k);
                const auto first = o->timing
                                       ? measure_cost(spec, o->head_dim, o->heads, StepKind::kFirst, o->seed, o->repeats)
                                       : predict_cost(spec, o->head_dim, o->heads, StepKind::kFirst);
                const auto cached = predict_cost(spec, o->head_dim, o->heads, StepKind::kCached);
                csv << to_string(mode) << ',' << c << ',' << first.score_entries << ','
                    << first.attention_flops << ',' << first.score_bytes << ',';
                if (first.wall_time_ns) csv << *first.wall_time_ns;
                csv << ',' << first.projection_flops << ',' << first.peak_score_bytes << '\n';
                auto first_json = to_json(first);
                first_json.erase("wall_time_ns");  // timing lives in the CSV only
                rows.push_back({{"mode", to_string(mode)},
                                {"c", c},
                                {"first_step", first_json},
                                {"cached_step", to_json(cached)}});
                cs.push_back(static_cast<double>(c));
                entries.push_back(static_cast<double>(first.score_entries));
              }
              if (cs.size() >= 2) slopes[std::string(to_string(mode))] = loglog_slope(cs, entries);
            }
            ctx.emit(o->out, csv.str());
            if (!o->report.empty()) {
              auto doc = header;
              doc["rows"] = rows;
              doc["entry_slopes"] = slopes;
              ctx.emit(o->report, doc.dump(2) + "\n");
            }
            return kOk;
          }};
}

// ----------------------------------------------------------------- analyze

Command add_analyze(CLI::App& app) {
  struct Opts {
    std::string input;
    std::string grid;
    std::vector<std::size_t> radii{0, 1, 2, 4};
    std::string format = "json";
    std::string output;
  };
  auto o = std::make_shared<Opts>();
  auto* analyze = app.add_subcommand("analyze", "Attention map analysis");
  analyze->require_subcommand(1);
  auto* sub = analyze->add_subcommand("attn", "Band mass of image-to-condition attention maps");
  sub->configurable();
  sub->add_option("--input", o->input, "Tensor file: [N,N], [H,N,N] or [L,H,N,N]")
      ->required()
      ->check(CLI::ExistingFile);
  sub->add_option("--grid", o->grid, "Grid HxW with H*W = N")->required();
  sub->add_option("--radii", o->radii, "Chebyshev radii")->delimiter(',')->capture_default_str();
  sub->add_option("--out", o->format, "Output format")
      ->capture_default_str()
      ->check(CLI::IsMember({"json", "csv"}));
  sub->add_option("--output", o->output, "Output path (default stdout)");

  return {sub, "analyze attn", [o](Context& ctx) {
            const auto grid = parse_grid(o->grid);
            const auto raw = load_tensor(o->input).cast<double>();
            const auto& shape = raw.shape();
            const std::size_t n = grid.size();
            if (shape.size() < 2 || shape.size() > 4 || shape[shape.size() - 1] != n ||
                shape[shape.size() - 2] != n) {
              throw ValidationError("attention tensor must end in [" + std::to_string(n) + "," +
                                    std::to_string(n) + "], got " + shape_string(shape));
            }
            const std::size_t layers = shape.size() == 4 ? shape[0] : 1;
            const std::size_t heads = shape.size() >= 3 ? shape[shape.size() - 3] : 1;
            std::vector<BandMassProfile> profiles;
            for (std::size_t l = 0; l < layers; ++l) {
              for (std::size_t h = 0; h < heads; ++h) {
                auto slice = Tensor64::matrix(n, n);
                const std::size_t offset = (l * heads + h) * n * n;
                std::copy_n(raw.data().begin() + static_cast<std::ptrdiff_t>(offset), n * n, slice.data().begin());
                auto p = band_mass(slice, grid, o->radii);
                p.layer = static_cast<int>(l);
                p.head = static_cast<int>(h);
                profiles.push_back(std::move(p));
              }
            }
            const auto mean = average_profiles(profiles);
            std::vector<double> uniform;
            for (std::size_t r : o->radii) uniform.push_back(uniform_band_mass(grid, r));

            const auto header = ctx.header({{"input", std::filesystem::path(o->input).filename().string()},
                                            {"grid", {grid.height, grid.width}},
                                            {"radii", o->radii},
                                            {"shape", shape}});
            if (o->format == "csv") {
              std::ostringstream csv;
              csv << csv_comment(header) << "layer,head,radius,mass,uniform\n";
              auto rows = [&](const std::string& l, const std::string& h, const BandMassProfile& p) {
                for (std::size_t k = 0; k < p.radii.size(); ++k) {
                  csv << l << ',' << h << ',' << p.radii[k] << ',' << format_double(p.mass[k]) << ','
                      << format_double(uniform[k]) << '\n';
                }
              };
              for (const auto& p : profiles) rows(std::to_string(p.layer), std::to_string(p.head), p);
              rows("mean", "mean", mean);
              ctx.emit(o->output, csv.str());
            } else {
              auto doc = header;
              doc["profiles"] = nlohmann::json::array();
              for (const auto& p : profiles) doc["profiles"].push_back(to_json(p));
              doc["mean"] = to_json(mean);
              doc["uniform"] = uniform;
              ctx.emit(o->output, doc.dump(2) + "\n");
            }
            return kOk;
          }};
}

// -------------------------------------------------------- sample-timesteps

Command add_sample_timesteps(CLI::App& app) {
  struct Opts {
    std::string preset = "csas";
    std::optional<double> mu, sigma;
    std::size_t n = 100000;
    std::uint64_t seed = 0;
    std::string out, summary;
  };
  auto o = std::make_shared<Opts>();
  auto* sub = app.add_subcommand("sample-timesteps", "Draw training timesteps from a logit-normal preset");
  sub->configurable();
  sub->add_option("--preset", o->preset, "Sampler preset")
      ->capture_default_str()
      ->check(CLI::IsMember({"csas", "standard", "reversed"}));
  sub->add_option("--mu", o->mu, "Override the preset location");
  sub->add_option("--sigma", o->sigma, "Override the preset scale");
  sub->add_option("-n,--count", o->n, "Number of draws")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--seed", o->seed, "Seed")->capture_default_str();
  sub->add_option("--out", o->out, "CSV path, one t per line");
  sub->add_option("--summary", o->summary, "Summary JSON path (default stdout)");

  return {sub, "sample-timesteps", [o](Context& ctx) {
            auto cfg = SamplerConfig::preset(o->preset);
            if (o->mu) cfg.mu = *o->mu;
            if (o->sigma) cfg.sigma = *o->sigma;
            cfg.validate();
            Rng rng(o->seed);
            const auto t = sample_t(rng, cfg, o->n);
            const auto s = summarize(t, cfg);
            const auto header = ctx.header(
                {{"preset", cfg.name}, {"mu", cfg.mu}, {"sigma", cfg.sigma}, {"n", o->n}, {"seed", o->seed}});
            if (!o->out.empty()) {
              std::string csv = csv_comment(header);
              csv.reserve(csv.size() + o->n * 20);
              for (double v : t.data()) {
                csv += format_double(v);
                csv += '\n';
              }
              ctx.emit(o->out, csv);
            }
            auto doc = header;
            doc["summary"] = {{"count", s.count},
                              {"median", s.median},
                              {"mean", s.mean},
                              {"p_above_half", s.frac_above_half},
                              {"ks", s.ks}};
            doc["analytic"] = {{"median", quantile_t(cfg, 0.5)}, {"p_above_half", 1.0 - cdf_t(cfg, 0.5)}};
            ctx.emit(o->summary, doc.dump(2) + "\n");
            return kOk;
          }};
}

// --------------------------------------------------------------- train-toy

namespace {

struct ModelOpts {
  std::string grid = "8x8";
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t head_dim = 8;
  std::size_t subject_len = 0;

  void add(CLI::App* sub) {
    sub->add_option("--grid", grid, "Image grid HxW")->capture_default_str();
    sub->add_option("--layers", layers, "Transformer blocks")->capture_default_str();
    sub->add_option("--heads", heads, "Attention heads")->capture_default_str();
    sub->add_option("--head-dim", head_dim, "Head width")->capture_default_str();
    sub->add_option("--subject-len", subject_len, "Subject tokens (0: no subject condition)")
        ->capture_default_str();
  }

  ToyModelConfig resolve() const {
    ToyModelConfig c;
    c.grid = parse_grid(grid);
    c.layers = layers;
    c.heads = heads;
    c.head_dim = head_dim;
    c.subject_len = subject_len;
    c.validate();
    return c;
  }
};

}  // namespace

Command add_train_toy(CLI::App& app) {
  struct Opts {
    std::string preset = "csas";
    std::size_t iters = TrainConfig{}.iterations;
    std::uint64_t seed = 0;
    std::string attn = "pka";
    std::string out;
    std::size_t batch = TrainConfig{}.batch;
    double lr = TrainConfig{}.learning_rate;
    bool cosine = false;
    std::size_t eval_every = TrainConfig{}.eval_every;
    std::size_t dataset_size = TrainConfig{}.dataset_size;
    ModelOpts model;
  };
  auto o = std::make_shared<Opts>();
  auto* sub = app.add_subcommand("train-toy", "Flow-matching training of the toy model");
  sub->configurable();
  sub->add_option("--preset", o->preset, "Timestep sampler preset")
      ->capture_default_str()
      ->check(CLI::IsMember({"csas", "standard", "reversed"}));
  sub->add_option("--iters", o->iters, "Optimizer steps")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--seed", o->seed, "Seed")->capture_default_str();
  sub->add_option("--attn", o->attn, "pka (block kernels) or dense (full mask)")
      ->capture_default_str()
      ->check(CLI::IsMember({"pka", "dense"}));
  sub->add_option("--out", o->out, "Output directory")->required();
  sub->add_option("--batch", o->batch, "Minibatch size")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--lr", o->lr, "Adam learning rate")->capture_default_str();
  sub->add_flag("--cosine", o->cosine, "Cosine decay of the learning rate to zero");
  sub->add_option("--eval-every", o->eval_every, "Evaluation interval")->capture_default_str();
  sub->add_option("--dataset-size", o->dataset_size, "Synthetic training items")->capture_default_str();
  o->model.add(sub);

  return {sub, "train-toy", [o](Context& ctx) {
            TrainConfig cfg;
            cfg.model = o->model.resolve();
            cfg.sampler = SamplerConfig::preset(o->preset);
            cfg.mask = o->attn == "dense" ? MaskMode::kDenseFull : MaskMode::kPka;
            cfg.backend = o->attn == "dense" ? AttentionBackend::kDense : AttentionBackend::kSparse;
            cfg.iterations = o->iters;
            cfg.batch = o->batch;
            cfg.learning_rate = o->lr;
            cfg.cosine_decay = o->cosine;
            cfg.eval_every = o->eval_every;
            cfg.dataset_size = o->dataset_size;
            cfg.seed = o->seed;

            const std::filesystem::path dir(o->out);
            std::filesystem::create_directories(dir);
            const auto header = ctx.header(to_json(cfg));
            const auto result = train(cfg);

            std::ostringstream csv;
            csv << csv_comment(header) << "iteration,loss,eval_loss,recon_mse\n";
            for (const auto& row : result.trace) {
              csv << row.iteration << ',' << format_double(row.loss) << ',';
              if (row.eval_loss) csv << format_double(*row.eval_loss);
              csv << ',';
              if (row.recon_mse) csv << format_double(*row.recon_mse);
              csv << '\n';
            }
            ctx.emit((dir / "trace.csv").string(), csv.str());

            const auto weights = (dir / "weights.pkat").string();
            result.model.save(weights);
            ctx.write_sidecar(weights);
            ctx.emit((dir / "model.json").string(), to_json(cfg.model).dump(2) + "\n");

            auto doc = header;
            doc["initial_eval_loss"] = result.initial_eval_loss;
            doc["final_eval_loss"] = result.final_eval_loss;
            doc["final_recon_mse"] = result.final_recon_mse;
            doc["final_train_loss"] = result.trace.back().loss;
            const auto ts = summarize(Tensor64(Shape{result.timesteps.size()}, result.timesteps), cfg.sampler);
            doc["timesteps"] = {{"count", ts.count}, {"median", ts.median}, {"p_above_half", ts.frac_above_half}};
            const auto text = doc.dump(2) + "\n";
            ctx.emit((dir / "summary.json").string(), text);
            *ctx.out << text;
            return kOk;
          }};
}

// ----------------------------------------------------------------- denoise

namespace {

template <typename T>
nlohmann::json run_denoise(const ToyDiT<float>& model32, std::uint64_t seed, std::uint64_t sample_seed,
                           const DenoiseOptions& opts, Tensor& image_out) {
  const auto model = model32.cast<T>();
  const auto& cfg = model.config();
  const auto sample = make_dataset<T>(cfg, 1, sample_seed)[0];
  Rng rng(seed);
  const auto noise = random_normal<T>(rng, Shape{cfg.grid.size(), cfg.channels});
  const auto r = denoise(model, sample, noise, opts);
  image_out = r.image.template cast<float>();

  nlohmann::json trace = nlohmann::json::array();
  for (const auto& s : r.trace) trace.push_back(to_json(s));
  double recon = 0.0;
  if (!sample.spatial.empty()) {
    const auto derived = derive_condition(r.image);
    for (std::size_t i = 0; i < derived.size(); ++i) {
      const double d = static_cast<double>(derived[i]) - static_cast<double>(sample.spatial[0][i]);
      recon += d * d;
    }
    recon /= static_cast<double>(derived.size());
  }
  return {{"trace", trace}, {"cache_bytes", r.cache_bytes}, {"recon_mse", recon}};
}

}  // namespace

Command add_denoise(CLI::App& app) {
  struct Opts {
    std::string run_dir, weights, model_config;
    std::uint64_t seed = 0, sample_seed = 0;
    std::size_t steps = 28;
    bool no_cache = false, no_gating = false;
    std::string mask = "pka";
    std::size_t band_k = 1;
    std::string backend = "sparse";
    double epsilon = 0.2;
    std::string normalization = "softmax";
    std::string precision = "fp32";
    std::string out, trace;
    ModelOpts model;
  };
  auto o = std::make_shared<Opts>();
  auto* sub = app.add_subcommand("denoise", "Euler sampling with the toy model");
  sub->configurable();
  sub->add_option("--run-dir", o->run_dir, "train-toy output directory (model.json, weights.pkat)")
      ->check(CLI::ExistingDirectory);
  sub->add_option("--weights", o->weights, "Weights file")->check(CLI::ExistingFile);
  sub->add_option("--model-config", o->model_config, "Model config JSON")->check(CLI::ExistingFile);
  sub->add_option("--seed", o->seed, "Noise seed (and init seed without weights)")->capture_default_str();
  sub->add_option("--sample-seed", o->sample_seed, "Seed of the conditioning sample")->capture_default_str();
  sub->add_option("--steps", o->steps, "Euler steps")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_flag("--no-cache", o->no_cache, "Recompute the condition branch every step");
  sub->add_flag("--no-gating", o->no_gating, "Leave image-to-subject attention ungated");
  sub->add_option("--mask", o->mask, "Mask")->capture_default_str()->check(CLI::IsMember(kMaskNames));
  sub->add_option("--band-k", o->band_k, "Band window side")->capture_default_str();
  sub->add_option("--backend", o->backend, "Attention backend")
      ->capture_default_str()
      ->check(CLI::IsMember({"sparse", "dense"}));
  sub->add_option("--epsilon", o->epsilon, "Keyword threshold")->capture_default_str();
  sub->add_option("--normalization", o->normalization, "Keyword score normalization")
      ->capture_default_str()
      ->check(CLI::IsMember({"softmax", "relative"}));
  sub->add_option("--precision", o->precision, "Arithmetic precision")
      ->capture_default_str()
      ->check(CLI::IsMember({"fp32", "fp64"}));
  sub->add_option("--out", o->out, "Generated image tensor file");
  sub->add_option("--trace", o->trace, "Trace JSON path (default stdout)");
  o->model.add(sub);

  return {sub, "denoise", [o](Context& ctx) {
            std::string weights = o->weights, model_config = o->model_config;
            if (!o->run_dir.empty()) {
              const std::filesystem::path dir(o->run_dir);
              if (weights.empty()) weights = (dir / "weights.pkat").string();
              if (model_config.empty()) model_config = (dir / "model.json").string();
            }
            const auto cfg = model_config.empty() ? o->model.resolve()
                                                  : model_config_from_json(read_json_file(model_config));
            const auto model = weights.empty() ? ToyDiT<float>(cfg, o->seed) : ToyDiT<float>::load(cfg, weights);

            DenoiseOptions opts;
            opts.steps = o->steps;
            opts.mask = parse_mask_mode(o->mask);
            opts.use_cache = !o->no_cache && opts.mask != MaskMode::kDenseFull;
            opts.band_k = o->band_k;
            opts.backend = parse_backend(o->backend);
            opts.keyword_gating = !o->no_gating;
            opts.epsilon = o->epsilon;
            opts.normalization = parse_score_normalization(o->normalization);

            nlohmann::json config{{"model", to_json(cfg)},
                                  {"weights", weights.empty() ? nlohmann::json() : nlohmann::json(std::filesystem::path(weights).filename().string())},
                                  {"seed", o->seed},
                                  {"sample_seed", o->sample_seed},
                                  {"steps", opts.steps},
                                  {"use_cache", opts.use_cache},
                                  {"mask", to_string(opts.mask)},
                                  {"band_k", opts.band_k},
                                  {"backend", to_string(opts.backend)},
                                  {"keyword_gating", opts.keyword_gating},
                                  {"epsilon", opts.epsilon},
                                  {"normalization", to_string(opts.normalization)},
                                  {"precision", o->precision}};
            Tensor image;
            auto body = o->precision == "fp64"
                            ? run_denoise<double>(model, o->seed, o->sample_seed, opts, image)
                            : run_denoise<float>(model, o->seed, o->sample_seed, opts, image);
            if (!o->out.empty()) {
              save_tensor(o->out, image);
              ctx.write_sidecar(o->out);
            }
            auto doc = ctx.header(config);
            doc.update(body);
            ctx.emit(o->trace, doc.dump(2) + "\n");
            return kOk;
          }};
}

}  // namespace pka::cli
