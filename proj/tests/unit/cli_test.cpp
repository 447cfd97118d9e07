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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "json.hpp"
#include "pka/tensor_io.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "pka");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = pka::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "pka_cli_test";
  fs::create_directories(dir);
  return dir / name;
}

std::size_t data_lines(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#') ++n;
  }
  return n;
}

}  // namespace

TEST_CASE("verify: passes and reports the worst error") {
  const auto r = run({"verify", "--seed", "7", "--instances", "25"});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j.at("pass") == true);
  CHECK(j.at("instances") == 25);
  CHECK(j.at("max_abs_err").get<double>() <= 1e-5);
  CHECK(j.at("config").at("seed") == 7);
}

TEST_CASE("verify: a mask spec file is checked directly") {
  const auto path = scratch("mask.json");
  std::ofstream(path) << R"({"layout": {"text_len": 2, "grid": [2, 2], "spatial_conditions": 1,
      "subject_lengths": [3], "keywords": [0]}, "mode": "pka", "band_k": 1})";
  const auto r = run({"verify", "--mask", path.string(), "--instances", "5"});
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(nlohmann::json::parse(r.out).at("config").contains("mask"));

  std::ofstream(path) << "{ not json";
  CHECK(run({"verify", "--mask", path.string()}).code == 1);
}

TEST_CASE("gradcheck: short run passes") {
  const auto r = run({"gradcheck", "--instances", "1"});
  REQUIRE(r.code == 0);
  CHECK(nlohmann::json::parse(r.out).at("kernels").size() == 7);
}

TEST_CASE("bench scaling: one row per mode and condition count, byte-identical reruns") {
  const auto a = scratch("a.csv"), b = scratch("b.csv"), rep = scratch("r.json");
  const std::vector<std::string> args{"bench", "scaling", "--conditions", "1,2,4,8,16",
                                      "--tokens-per-cond", "64", "--mode", "dense,pka"};
  auto with = [&](const fs::path& out) {
    auto v = args;
    v.insert(v.end(), {"--out", out.string(), "--report", rep.string()});
    return run(v);
  };
  REQUIRE(with(a).code == 0);
  REQUIRE(with(b).code == 0);
  const auto text = slurp(a);
  CHECK(data_lines(text) == 1 + 10);
  CHECK(text == slurp(b));
  CHECK(fs::exists(a.string() + ".meta.json"));
  const auto report = nlohmann::json::parse(slurp(rep));
  CHECK(report.at("rows").size() == 10);
  CHECK(report.at("rows")[0].contains("cached_step"));
  CHECK(report.at("rows")[0].contains("first_step"));
}

TEST_CASE("bench scaling: timed run cross-checks counters and fills wall_ns") {
  const auto r = run({"bench", "scaling", "--conditions", "1,2", "--mode", "pka", "--timing",
                      "--repeats", "1", "--head-dim", "8", "--heads", "1"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("pka,1,9344,") != std::string::npos);
  CHECK(r.out.find(",,") == std::string::npos);
}

TEST_CASE("sample-timesteps: csas median and csv output") {
  const auto csv = scratch("t.csv");
  const auto r = run({"sample-timesteps", "--preset", "csas", "-n", "100000", "--seed", "1",
                      "--out", csv.string()});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(std::abs(j.at("summary").at("median").get<double>() - 0.6225) <= 0.01);
  CHECK(data_lines(slurp(csv)) == 100000);
}

TEST_CASE("analyze attn: identity maps are fully diagonal") {
  const auto path = scratch("eye.pkat");
  auto eye = pka::Tensor(pka::Shape{2, 16, 16});
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t i = 0; i < 16; ++i) eye[h * 256 + i * 16 + i] = 1.0f;
  }
  pka::save_tensor(path, eye);
  const auto r = run({"analyze", "attn", "--input", path.string(), "--grid", "4x4", "--radii", "0,1"});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j.at("profiles").size() == 2);
  CHECK(j.at("mean").at("mass")[0] == 1.0);

  const auto csv = run({"analyze", "attn", "--input", path.string(), "--grid", "4x4", "--out", "csv"});
  CHECK(data_lines(csv.out) == 1 + 3 * 4);
  CHECK(run({"analyze", "attn", "--input", path.string(), "--grid", "3x3"}).code == 1);
}

TEST_CASE("train-toy and denoise: outputs, reruns and reload") {
  const auto dir = scratch("run");
  const std::vector<std::string> args{"train-toy", "--iters", "6", "--eval-every", "3", "--grid", "4x4",
                                      "--seed", "2", "--out", dir.string()};
  REQUIRE(run(args).code == 0);
  const auto trace = slurp(dir / "trace.csv");
  const auto weights = slurp(dir / "weights.pkat");
  CHECK(data_lines(trace) == 1 + 6);
  REQUIRE(run(args).code == 0);
  CHECK(slurp(dir / "trace.csv") == trace);
  CHECK(slurp(dir / "weights.pkat") == weights);

  const auto r = run({"denoise", "--run-dir", dir.string(), "--steps", "4", "--precision", "fp64"});
  INFO(r.err);
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j.at("trace").size() == 4);
  CHECK(j.at("trace")[1].at("cache_hit") == true);
  CHECK(run({"denoise", "--run-dir", dir.string(), "--band-k", "2", "--mask", "band"}).code == 2);
}

TEST_CASE("errors: usage problems exit 2 with structured json") {
  auto r = run({"verify", "--no-such-flag"});
  CHECK(r.code == 2);
  CHECK(nlohmann::json::parse(r.err).at("error").at("kind") == "usage_error");
  CHECK(run({}).code == 2);
  CHECK(run({"bench", "scaling", "--grid", "8by8"}).code == 2);
  CHECK(run({"sample-timesteps", "--preset", "sideways"}).code == 2);
  CHECK(run({"train-toy", "--out", scratch("x").string(), "--attn", "sparse"}).code == 2);
  CHECK(run({"sample-timesteps", "--sigma", "-1"}).code == 2);
}

TEST_CASE("config file overrides and thread cap") {
  const auto cfg = scratch("cfg.json");
  std::ofstream(cfg) << R"({"verify": {"instances": 3, "seed": 11}})";
  auto r = run({"--config", cfg.string(), "verify"});
  REQUIRE(r.code == 0);
  auto j = nlohmann::json::parse(r.out);
  CHECK(j.at("instances") == 3);
  CHECK(j.at("config").at("seed") == 11);

  std::ofstream(cfg) << R"({"verify": {"bogus": 1}})";
  CHECK(run({"--config", cfg.string(), "verify"}).code == 2);
  std::ofstream(cfg) << "[1, 2]";
  CHECK(run({"--config", cfg.string(), "verify"}).code == 2);

  setenv("PKA_NUM_THREADS", "3", 1);
  r = run({"verify", "--instances", "1"});
  CHECK(nlohmann::json::parse(r.out).at("threads").at("requested") == 3);
  setenv("PKA_NUM_THREADS", "zero", 1);
  CHECK(run({"verify", "--instances", "1"}).code == 2);
  unsetenv("PKA_NUM_THREADS");
}
