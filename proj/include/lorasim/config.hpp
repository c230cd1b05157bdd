// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "lorasim/baselines.hpp"
#include "lorasim/block_pool.hpp"
#include "lorasim/cost_model.hpp"
#include "lorasim/simulator.hpp"
#include "lorasim/swapper.hpp"
#include "lorasim/workload.hpp"

namespace lorasim {

struct TraceSource {
  std::string path;
  double time_scale = 1.0;
};

/// Everything one run needs. Loaded from a JSON file; see README for the
/// schema.
struct ScenarioConfig {
  std::uint64_t seed = 1;
  std::string policy = "fastlibra";
  std::optional<double> lora_ratio;
  PoolConfig pool{1024, 8192, 32, 16.0 * 1024 * 1024, 16e9};
  double lora_bytes_per_rank = 4.0 * 1024 * 1024;
  std::vector<std::int64_t> lora_ranks{32, 64};
  CostParams cost;
  SwapperConfig swapper;
  LatencyModel latency{0.0002, 0.03, 0.02};
  std::optional<ScenarioSpec> workload;
  std::optional<TraceSource> trace;
  std::string output_dir = "out";

  void validate() const {
    if (policy != "fastlibra" && policy != "static_lru" && policy != "no_history") {
      throw ConfigError("policy.name", "unknown policy '" + policy + "' (fastlibra | static_lru | no_history)");
    }
    if (lora_ratio) {
      if (policy != "static_lru") throw ConfigError("policy.lora_ratio", "only valid with policy static_lru");
      StaticPartitionConfig{*lora_ratio}.validate();
    }
    pool.validate();
    if (!(lora_bytes_per_rank > 0)) throw ConfigError("lora.bytes_per_rank", "must be > 0");
    if (lora_ranks.empty()) throw ConfigError("lora.ranks", "must not be empty");
    for (auto r : lora_ranks) {
      if (r <= 0) throw ConfigError("lora.ranks", "every rank must be > 0");
    }
    cost.validate();
    swapper.validate();
    latency.validate();
    if (workload.has_value() == trace.has_value()) {
      throw ConfigError("workload", "exactly one of 'workload' and 'trace' must be given");
    }
    if (workload) workload->validate();
    if (trace) {
      if (trace->path.empty()) throw ConfigError("trace.path", "must not be empty");
      if (!(trace->time_scale > 0)) throw ConfigError("trace.time_scale", "must be > 0");
    }
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& section, std::initializer_list<std::string_view> keys) {
  if (!j.is_object()) throw ConfigError(section.empty() ? "<root>" : section, "must be an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (std::string_view allowed : keys) known = known || allowed == k;
    if (!known) throw ConfigError(section.empty() ? k : section + "." + k, "unknown key");
  }
}

template <typename T>
void read(const nlohmann::json& j, const std::string& section, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(section + "." + key, "has the wrong type");
  }
}

inline IntRange read_range(const nlohmann::json& j, const std::string& field, IntRange fallback) {
  if (!j.contains(field)) return fallback;
  const auto& v = j.at(field);
  try {
    if (v.is_array() && v.size() == 2) return IntRange{v[0].get<std::int64_t>(), v[1].get<std::int64_t>()};
    if (v.is_number_integer()) return IntRange{v.get<std::int64_t>(), v.get<std::int64_t>()};
  } catch (const nlohmann::json::exception&) {
  }
  throw ConfigError("workload." + field, "must be an integer or a [min, max] pair");
}

inline ScenarioSpec parse_workload(const nlohmann::json& j) {
  check_keys(j, "workload", {"n_lora", "distribution", "rate", "duration", "max_queries", "sessions_per_lora",
                             "turns", "new_tokens", "output_tokens"});
  ScenarioSpec s;
  read(j, "workload", "n_lora", s.n_lora);
  read(j, "workload", "rate", s.rate);
  read(j, "workload", "duration", s.duration);
  read(j, "workload", "max_queries", s.max_queries);
  read(j, "workload", "sessions_per_lora", s.sessions_per_lora);
  s.turns = read_range(j, "turns", s.turns);
  s.new_tokens = read_range(j, "new_tokens", s.new_tokens);
  s.output_tokens = read_range(j, "output_tokens", s.output_tokens);
  if (j.contains("distribution")) {
    const auto& d = j.at("distribution");
    const std::string sec = "workload.distribution";
    check_keys(d, sec, {"kind", "sigma", "drift", "center"});
    std::string kind = "uniform";
    read(d, sec, "kind", kind);
    if (kind == "uniform") {
      s.distribution.kind = DistributionKind::Uniform;
    } else if (kind == "distinct") {
      s.distribution.kind = DistributionKind::Distinct;
    } else if (kind == "gaussian") {
      s.distribution.kind = DistributionKind::Gaussian;
    } else if (kind == "shifting") {
      s.distribution.kind = DistributionKind::Shifting;
    } else {
      throw ConfigError(sec + ".kind", "unknown distribution '" + kind + "'");
    }
    read(d, sec, "sigma", s.distribution.sigma);
    read(d, sec, "drift", s.distribution.drift);
    read(d, sec, "center", s.distribution.center);
  }
  return s;
}

}  // namespace detail

inline ScenarioConfig parse_config(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::read;
  check_keys(j, "", {"seed", "policy", "pool", "lora", "cost", "swapper", "latency", "workload", "trace", "output_dir"});
  ScenarioConfig c;
  read(j, "", "seed", c.seed);
  read(j, "", "output_dir", c.output_dir);
  if (j.contains("policy")) {
    const auto& p = j.at("policy");
    if (p.is_string()) {
      c.policy = p.get<std::string>();
    } else {
      check_keys(p, "policy", {"name", "lora_ratio"});
      read(p, "policy", "name", c.policy);
      if (p.contains("lora_ratio")) {
        double r = 0;
        read(p, "policy", "lora_ratio", r);
        c.lora_ratio = r;
      }
    }
  }
  if (j.contains("pool")) {
    const auto& p = j.at("pool");
    check_keys(p, "pool", {"hbm_blocks", "main_blocks", "block_tokens", "block_bytes", "pcie_bandwidth"});
    read(p, "pool", "hbm_blocks", c.pool.hbm_blocks);
    read(p, "pool", "main_blocks", c.pool.main_blocks);
    read(p, "pool", "block_tokens", c.pool.block_tokens);
    read(p, "pool", "block_bytes", c.pool.block_bytes);
    read(p, "pool", "pcie_bandwidth", c.pool.pcie_bandwidth);
  }
  if (j.contains("lora")) {
    const auto& l = j.at("lora");
    check_keys(l, "lora", {"bytes_per_rank", "ranks"});
    read(l, "lora", "bytes_per_rank", c.lora_bytes_per_rank);
    read(l, "lora", "ranks", c.lora_ranks);
  }
  if (j.contains("cost")) {
    const auto& p = j.at("cost");
    check_keys(p, "cost", {"bs_window", "freq_window", "sigmoid_midpoint", "sigmoid_scale", "smoothing", "prob_source",
                           "lora_reward_scope"});
    read(p, "cost", "bs_window", c.cost.bs_window);
    read(p, "cost", "freq_window", c.cost.freq_window);
    read(p, "cost", "sigmoid_midpoint", c.cost.sigmoid_midpoint);
    read(p, "cost", "sigmoid_scale", c.cost.sigmoid_scale);
    read(p, "cost", "smoothing", c.cost.smoothing);
    std::string s;
    read(p, "cost", "prob_source", s);
    if (s == "lora") {
      c.cost.prob_source = ProbSource::Lora;
    } else if (!s.empty() && s != "node") {
      throw ConfigError("cost.prob_source", "must be node or lora");
    }
    s.clear();
    read(p, "cost", "lora_reward_scope", s);
    if (s == "all_nodes") {
      c.cost.lora_reward_scope = RewardScope::AllNodes;
    } else if (!s.empty() && s != "lora_only") {
      throw ConfigError("cost.lora_reward_scope", "must be lora_only or all_nodes");
    }
  }
  if (j.contains("swapper")) {
    const auto& p = j.at("swapper");
    check_keys(p, "swapper", {"monitor_interval", "upper_threshold", "lower_threshold", "plan_during_transfer"});
    read(p, "swapper", "monitor_interval", c.swapper.monitor_interval);
    read(p, "swapper", "upper_threshold", c.swapper.upper_threshold);
    read(p, "swapper", "lower_threshold", c.swapper.lower_threshold);
    read(p, "swapper", "plan_during_transfer", c.swapper.plan_during_transfer);
  }
  if (j.contains("latency")) {
    const auto& p = j.at("latency");
    check_keys(p, "latency", {"prefill_per_token", "decode_per_token", "base_step"});
    read(p, "latency", "prefill_per_token", c.latency.prefill_per_token);
    read(p, "latency", "decode_per_token", c.latency.decode_per_token);
    read(p, "latency", "base_step", c.latency.base_step);
  }
  if (j.contains("workload")) c.workload = detail::parse_workload(j.at("workload"));
  if (j.contains("trace")) {
    const auto& p = j.at("trace");
    check_keys(p, "trace", {"path", "time_scale"});
    TraceSource t;
    read(p, "trace", "path", t.path);
    read(p, "trace", "time_scale", t.time_scale);
    c.trace = t;
  }
  c.validate();
  return c;
}

/// Applies `a.b.c=value`. The value is read as JSON when it parses, as a
/// plain string otherwise.
inline void apply_override(nlohmann::json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError(std::string(assignment), "override must look like key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json* cur = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError(key, "empty path segment");
    if (!cur->is_object()) throw ConfigError(key, "parent is not an object");
    if (dot == std::string::npos) {
      (*cur)[part] = value;
      return;
    }
    if (part == "policy" && (*cur)["policy"].is_string()) {
      (*cur)["policy"] = nlohmann::json{{"name", (*cur)["policy"]}};
    }
    cur = &(*cur)[part];
    if (cur->is_null()) *cur = nlohmann::json::object();
    start = dot + 1;
  }
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path);
  try {
    return nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config", std::string("malformed JSON: ") + e.what());
  }
}

inline ScenarioConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  nlohmann::json j = read_json_file(path);
  for (const std::string& o : overrides) apply_override(j, o);
  ScenarioConfig c = parse_config(j);
  if (c.trace && !c.trace->path.empty() && c.trace->path.front() != '/') {
    const auto slash = path.find_last_of('/');
    if (slash != std::string::npos) c.trace->path = path.substr(0, slash + 1) + c.trace->path;
  }
  return c;
}

}  // namespace lorasim
