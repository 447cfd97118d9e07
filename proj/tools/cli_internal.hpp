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

#include <chrono>
#include <functional>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pka/layout.hpp"

namespace pka::cli {

// Bad flag values found after parsing (malformed grid, unknown preset name).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A verification suite ran and found a broken invariant.
class InvariantBreach : public std::runtime_error {
 public:
  InvariantBreach(const std::string& what, nlohmann::json report)
      : std::runtime_error(what), report_(std::move(report)) {}
  const nlohmann::json& report() const { return report_; }

 private:
  nlohmann::json report_;
};

struct Context {
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;
  std::string command;
  std::chrono::system_clock::time_point started;
  long threads_requested = 0;  // 0: not set

  // Fully resolved configuration header shared by every output.
  nlohmann::json header(nlohmann::json config) const;

  // Writes `content` to `path`, or to `out` for an empty path or "-". Files
  // get a `<path>.meta.json` sidecar holding the timestamps, so the primary
  // file depends only on flags and seed.
  void emit(const std::string& path, const std::string& content) const;
  void write_sidecar(const std::string& path) const;
};

struct Command {
  CLI::App* app = nullptr;  // the leaf subcommand whose parse selects this handler
  std::string name;
  std::function<int(Context&)> handler;
};

// Each registers its subcommand on `app` and returns the handler bound to
// the parsed option storage.
Command add_verify(CLI::App& app);
Command add_gradcheck(CLI::App& app);
Command add_bench(CLI::App& app);
Command add_analyze(CLI::App& app);
Command add_sample_timesteps(CLI::App& app);
Command add_train_toy(CLI::App& app);
Command add_denoise(CLI::App& app);

// Reads CLI11 configuration from a JSON document: top-level keys are root
// options, nested objects are subcommand sections.
class ConfigJson : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool write_description,
                        std::string prefix) const override;
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override;
};

GridShape parse_grid(const std::string& text);
std::string format_double(double v);

}  // namespace pka::cli
