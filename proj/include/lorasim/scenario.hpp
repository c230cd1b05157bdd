// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <future>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lorasim/baselines.hpp"
#include "lorasim/config.hpp"
#include "lorasim/fastlibra.hpp"
#include "lorasim/simulator.hpp"
#include "lorasim/workload.hpp"

namespace lorasim {

/// A trace realization and the queries built from it.
struct Workload {
  std::vector<TraceRecord> records;
  std::vector<Query> queries;
  std::uint64_t hash = 0;
  std::size_t n_lora = 0;
};

inline Workload materialize(const ScenarioConfig& cfg) {
  Workload w;
  double scale = 1.0;
  if (cfg.workload) {
    w.records = generate(*cfg.workload, cfg.seed);
    w.n_lora = cfg.workload->n_lora;
  } else {
    w.records = load_trace(cfg.trace->path);
    scale = cfg.trace->time_scale;
    for (const TraceRecord& r : w.records) w.n_lora = std::max<std::size_t>(w.n_lora, r.lora_id + 1);
  }
  w.queries = build_queries(w.records, cfg.pool.block_tokens, scale);
  w.hash = workload_hash(w.records);
  return w;
}

inline std::unique_ptr<CachePolicy> make_policy(const ScenarioConfig& cfg, std::string_view name) {
  if (name == "fastlibra") {
    return std::make_unique<DependencyAwarePolicy>(cfg.pool, cfg.lora_bytes_per_rank, cfg.cost, cfg.swapper);
  }
  if (name == "static_lru") {
    StaticPartitionConfig part;
    if (cfg.lora_ratio) part.lora_ratio = *cfg.lora_ratio;
    return std::make_unique<StaticPartitionLru>(cfg.pool, cfg.lora_bytes_per_rank, cfg.cost, part);
  }
  if (name == "no_history") return std::make_unique<NoHistoryKv>(cfg.pool, cfg.lora_bytes_per_rank, cfg.cost);
  throw ConfigError("policy.name", "unknown policy '" + std::string(name) + "'");
}

inline SimConfig sim_config(const ScenarioConfig& cfg, std::size_t n_lora) {
  SimConfig s;
  s.pool = cfg.pool;
  s.latency = cfg.latency;
  s.monitor_interval = cfg.swapper.monitor_interval;
  s.lora_bytes_per_rank = cfg.lora_bytes_per_rank;
  s.lora_ranks = cfg.lora_ranks;
  s.n_lora = n_lora;
  s.seed = cfg.seed;
  return s;
}

inline MetricsReport run_scenario(const ScenarioConfig& cfg, const Workload& w, std::string_view policy,
                                  SimObserver observer = {}) {
  Simulator sim(sim_config(cfg, w.n_lora), make_policy(cfg, policy), std::move(observer));
  return sim.run(w.queries);
}

inline constexpr Seconds kTtftTarget = 0.5;

struct SweepPoint {
  double rate = 0.0;
  Seconds mean_ttft = 0.0;
};

struct SweepResult {
  std::vector<SweepPoint> points;
  /// Largest rate such that it and every lower rate keep mean TTFT under the
  /// target; empty when even the first rate misses it.
  std::optional<double> peak;
};

inline SweepResult sweep_peak_throughput(const ScenarioConfig& cfg, std::string_view policy,
                                         const std::vector<double>& rates, bool parallel = false) {
  if (!cfg.workload) throw ConfigError("workload", "a rate sweep needs a generated workload");
  if (!std::is_sorted(rates.begin(), rates.end())) throw ConfigError("rates", "must be ascending");
  auto one = [&cfg, policy](double rate) {
    ScenarioConfig c = cfg;
    c.workload->rate = rate;
    const Workload w = materialize(c);
    return SweepPoint{rate, run_scenario(c, w, policy).summary.mean_ttft};
  };
  SweepResult r;
  if (parallel) {
    std::vector<std::future<SweepPoint>> futures;
    for (double rate : rates) futures.push_back(std::async(std::launch::async, one, rate));
    for (auto& f : futures) r.points.push_back(f.get());
  } else {
    for (double rate : rates) r.points.push_back(one(rate));
  }
  for (const SweepPoint& p : r.points) {
    if (!(p.mean_ttft < kTtftTarget)) break;
    r.peak = p.rate;
  }
  return r;
}

}  // namespace lorasim
