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

#include "cli.hpp"

#include <charconv>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cli_internal.hpp"
#include "pka/errors.hpp"

namespace pka::cli {

namespace {

constexpr const char* kVersion = "0.1.0";

std::string iso8601(std::chrono::system_clock::time_point tp) {
  const std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

long threads_from_env() {
  const char* raw = std::getenv("PKA_NUM_THREADS");
  if (raw == nullptr || *raw == '\0') return 0;
  char* end = nullptr;
  const long n = std::strtol(raw, &end, 10);
  if (*end != '\0' || n < 1) {
    throw UsageError(std::string("PKA_NUM_THREADS must be a positive integer, got '") + raw + "'");
  }
  return n;
}

void add_items(const nlohmann::json& node, std::vector<std::string>& parents,
               std::vector<CLI::ConfigItem>& items) {
  for (const auto& [key, value] : node.items()) {
    if (value.is_object()) {
      parents.push_back(key);
      add_items(value, parents, items);
      parents.pop_back();
      continue;
    }
    CLI::ConfigItem item;
    item.parents = parents;
    item.name = key;
    auto text = [](const nlohmann::json& v) {
      return v.is_string() ? v.get<std::string>() : v.dump();
    };
    if (value.is_array()) {
      for (const auto& v : value) item.inputs.push_back(text(v));
    } else {
      item.inputs.push_back(text(value));
    }
    items.push_back(std::move(item));
  }
}

nlohmann::json app_to_json(const CLI::App* app, bool default_also) {
  nlohmann::json j = nlohmann::json::object();
  for (const CLI::Option* opt : app->get_options()) {
    if (opt->get_lnames().empty() || !opt->get_configurable()) continue;
    const std::string& name = opt->get_lnames().front();
    if (opt->count() > 0) {
      const auto& results = opt->results();
      j[name] = results.size() == 1 ? nlohmann::json(results.front()) : nlohmann::json(results);
    } else if (default_also && !opt->get_default_str().empty()) {
      j[name] = opt->get_default_str();
    }
  }
  for (const CLI::App* sub : app->get_subcommands({})) {
    auto child = app_to_json(sub, default_also);
    if (!child.empty()) j[sub->get_name()] = std::move(child);
  }
  return j;
}

int exit_code_for(const Error& e) {
  const auto kind = e.kind();
  if (kind == "contract_violation" || kind == "accounting_error" || kind == "state_error" ||
      kind == "cache_miss" || kind == "unsupported_op") {
    return kInvariant;
  }
  if (kind == "parameter_error" || kind == "domain_error" || kind == "alignment_error") {
    return kUsage;
  }
  return kFailure;
}

int report_error(std::ostream& err, const std::string& command, std::string_view kind,
                 const std::string& message, int code, const nlohmann::json& detail = {}) {
  nlohmann::json j{{"error",
                    {{"kind", kind}, {"message", message}, {"exit_code", code}, {"command", command}}}};
  if (!detail.is_null()) j["error"]["detail"] = detail;
  err << j.dump() << '\n';
  return code;
}

}  // namespace

nlohmann::json Context::header(nlohmann::json config) const {
  nlohmann::json threads{{"effective", 1}};
  threads["requested"] = threads_requested > 0 ? nlohmann::json(threads_requested) : nlohmann::json();
  return {{"tool", "pka"}, {"version", kVersion}, {"command", command},
          {"config", std::move(config)}, {"threads", threads}};
}

void Context::emit(const std::string& path, const std::string& content) const {
  if (path.empty() || path == "-") {
    *out << content;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f << content;
  if (!f) throw FormatError("failed writing '" + path + "'");
  write_sidecar(path);
}

void Context::write_sidecar(const std::string& path) const {
  const auto now = std::chrono::system_clock::now();
  nlohmann::json meta{
      {"command", command},
      {"started_at", iso8601(started)},
      {"finished_at", iso8601(now)},
      {"elapsed_seconds", std::chrono::duration<double>(now - started).count()}};
  std::ofstream f(path + ".meta.json");
  f << meta.dump(2) << '\n';
}

std::string ConfigJson::to_config(const CLI::App* app, bool default_also, bool,
                                  std::string) const {
  return app_to_json(app, default_also).dump(2) + "\n";
}

std::vector<CLI::ConfigItem> ConfigJson::from_config(std::istream& input) const {
  nlohmann::json j;
  try {
    input >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CLI::ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw CLI::ConfigError("config must be a JSON object");
  std::vector<CLI::ConfigItem> items;
  std::vector<std::string> parents;
  add_items(j, parents, items);
  return items;
}

GridShape parse_grid(const std::string& text) {
  const auto x = text.find('x');
  GridShape g{0, 0};
  if (x != std::string::npos) {
    const char* b = text.data();
    const auto r1 = std::from_chars(b, b + x, g.height);
    const auto r2 = std::from_chars(b + x + 1, b + text.size(), g.width);
    if (r1.ec == std::errc{} && r1.ptr == b + x && r2.ec == std::errc{} &&
        r2.ptr == b + text.size() && g.height > 0 && g.width > 0) {
      return g;
    }
  }
  throw UsageError("grid must look like HxW with positive sides, got '" + text + "'");
}

std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Position-aware sparse attention engine: verification, benchmarks and toy training"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.config_formatter(std::make_shared<ConfigJson>());
  app.set_config("--config", "", "JSON file with option overrides");
  app.allow_config_extras(CLI::config_extras_mode::error);

  std::vector<Command> commands{add_verify(app),          add_gradcheck(app),
                                add_bench(app),           add_analyze(app),
                                add_sample_timesteps(app), add_train_toy(app),
                                add_denoise(app)};

  Context ctx;
  ctx.out = &out;
  ctx.err = &err;
  ctx.started = std::chrono::system_clock::now();
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return report_error(err, "", "usage_error", e.what(), kUsage);
  }

  for (auto& c : commands) {
    if (!c.app->parsed()) continue;
    ctx.command = c.name;
    try {
      ctx.threads_requested = threads_from_env();
      return c.handler(ctx);
    } catch (const UsageError& e) {
      return report_error(err, ctx.command, "usage_error", e.what(), kUsage);
    } catch (const InvariantBreach& e) {
      return report_error(err, ctx.command, "invariant_breach", e.what(), kInvariant, e.report());
    } catch (const Error& e) {
      return report_error(err, ctx.command, e.kind(), e.what(), exit_code_for(e));
    } catch (const CLI::ParseError& e) {
      return report_error(err, ctx.command, "usage_error", e.what(), kUsage);
    } catch (const std::exception& e) {
      return report_error(err, ctx.command, "internal_error", e.what(), kFailure);
    }
  }
  return report_error(err, "", "usage_error", "no subcommand given", kUsage);
}

}  // namespace pka::cli
