// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "lorasim/policy.hpp"
#include "lorasim/query.hpp"
#include "lorasim/swapper.hpp"
#include "lorasim/types.hpp"

namespace lorasim {

struct LatencyModel {
  Seconds prefill_per_token = 0.0;
  Seconds decode_per_token = 0.0;
  Seconds base_step = 0.0;

  void validate() const {
    if (!(prefill_per_token >= 0)) throw ConfigError("latency.prefill_per_token", "must be >= 0");
    if (!(decode_per_token >= 0)) throw ConfigError("latency.decode_per_token", "must be >= 0");
    if (!(base_step >= 0)) throw ConfigError("latency.base_step", "must be >= 0");
  }
};

struct QueryTimeline {
  std::uint64_t query_id = 0;
  std::uint64_t session_id = 0;
  LoraId lora_id = 0;
  Seconds arrival = 0.0;
  Seconds admit_time = 0.0;
  Seconds lora_ready = 0.0;
  Seconds kv_ready = 0.0;
  Seconds first_token_time = 0.0;
  Seconds completion_time = 0.0;
  Seconds queue_time = 0.0;
  Seconds lora_cold_start = 0.0;
  Seconds kv_cold_start = 0.0;
  Seconds compute_time = 0.0;
  std::int64_t prompt_tokens = 0;
  std::int64_t output_tokens = 0;
  BlockCount prompt_blocks = 0;
  BlockCount hbm_hit_blocks = 0;
  BlockCount main_hit_blocks = 0;
  BlockCount miss_blocks = 0;
  bool lora_hit = false;

  Seconds ttft() const noexcept { return first_token_time - arrival; }
  Seconds tpot() const noexcept {
    return output_tokens > 1 ? (completion_time - first_token_time) / static_cast<double>(output_tokens - 1) : 0.0;
  }
};

struct UtilizationSample {
  Seconds time = 0.0;
  BlockCount lora_blocks = 0;
  BlockCount history_kv_blocks = 0;
  BlockCount running_kv_blocks = 0;
  BlockCount capacity = 0;
  double invalid_kv_fraction = 0.0;
};

struct SwapRecord {
  Seconds time = 0.0;
  SwapDirection direction = SwapDirection::None;
  NodeId node = kInvalidNode;
  bool is_lora = false;
  double eval = 0.0;
  double usage_before = 0.0;
  double usage_after = 0.0;
};

struct Summary {
  std::size_t n_queries = 0;
  Seconds mean_ttft = 0.0;
  Seconds p50_ttft = 0.0;
  Seconds p99_ttft = 0.0;
  Seconds mean_tpot = 0.0;
  double kv_hit_rate = 0.0;
  double lora_hit_rate = 0.0;
  double invalid_kv_mean = 0.0;
};

struct MetricsReport {
  std::string policy;
  std::uint64_t seed = 0;
  std::vector<QueryTimeline> queries;
  std::vector<UtilizationSample> utilization;
  std::vector<SwapRecord> swaps;
  std::size_t pinned_warnings = 0;
  Summary summary;
};

/// Nearest-rank percentile of an unsorted sample; 0 when empty.
inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

inline Summary summarize(const std::vector<QueryTimeline>& qs, const std::vector<UtilizationSample>& util) {
  Summary s;
  s.n_queries = qs.size();
  std::vector<double> ttfts;
  ttfts.reserve(qs.size());
  double tpot_sum = 0.0;
  std::size_t tpot_n = 0;
  BlockCount hits = 0;
  BlockCount blocks = 0;
  std::size_t lora_hits = 0;
  for (const QueryTimeline& q : qs) {
    ttfts.push_back(q.ttft());
    if (q.output_tokens > 1) {
      tpot_sum += q.tpot();
      ++tpot_n;
    }
    hits += q.hbm_hit_blocks + q.main_hit_blocks;
    blocks += q.prompt_blocks;
    lora_hits += q.lora_hit ? 1 : 0;
  }
  if (!qs.empty()) {
    double sum = 0.0;
    for (double t : ttfts) sum += t;
    s.mean_ttft = sum / static_cast<double>(qs.size());
    s.lora_hit_rate = static_cast<double>(lora_hits) / static_cast<double>(qs.size());
  }
  s.p50_ttft = percentile(ttfts, 50.0);
  s.p99_ttft = percentile(std::move(ttfts), 99.0);
  s.mean_tpot = tpot_n ? tpot_sum / static_cast<double>(tpot_n) : 0.0;
  s.kv_hit_rate = blocks ? static_cast<double>(hits) / static_cast<double>(blocks) : 0.0;
  if (!util.empty()) {
    double sum = 0.0;
    for (const UtilizationSample& u : util) sum += u.invalid_kv_fraction;
    s.invalid_kv_mean = sum / static_cast<double>(util.size());
  }
  return s;
}

enum class EventKind : std::uint8_t { Transfer = 0, FirstToken = 1, Completion = 2, Tick = 3, Arrival = 4 };

/// Optional hooks for audits. All run on the event-loop thread.
struct SimObserver {
  std::function<void(const CachePolicy&, EventKind, Seconds)> on_event;
  std::function<void(const CachePolicy&, const MemoryAction&, Seconds)> on_issue;
  std::function<void(const CachePolicy&, NodeId, Seconds)> on_move_complete;
  std::function<void(const CachePolicy&, const TickResult&, Seconds)> on_tick;
};

struct SimConfig {
  PoolConfig pool;
  LatencyModel latency;
  Seconds monitor_interval = 0.1;
  double lora_bytes_per_rank = 0.0;
  /// LoRA i gets lora_ranks[i % size].
  std::vector<std::int64_t> lora_ranks{32, 64};
  /// LoRA ids 0..n_lora-1 are registered even if no query uses them.
  std::size_t n_lora = 0;
  /// Extra monitor ticks after the last query completes.
  std::size_t drain_ticks = 0;
  std::uint64_t seed = 0;

  void validate() const {
    pool.validate();
    latency.validate();
    if (!(monitor_interval > 0)) throw ConfigError("swapper.monitor_interval", "must be > 0");
    if (!(lora_bytes_per_rank > 0)) throw ConfigError("lora.bytes_per_rank", "must be > 0");
    if (lora_ranks.empty()) throw ConfigError("lora.ranks", "must not be empty");
    for (auto r : lora_ranks) {
      if (r <= 0) throw ConfigError("lora.ranks", "every rank must be > 0");
    }
  }
};

/// Discrete-event engine. Ties at equal timestamps run transfers first, then
/// first tokens, completions, ticks and arrivals, then by insertion order.
class Simulator {
 public:
  Simulator(SimConfig config, std::unique_ptr<CachePolicy> policy, SimObserver observer = {})
      : config_(std::move(config)),
        policy_(std::move(policy)),
        observer_(std::move(observer)),
        channels_(config_.pool) {
    config_.validate();
  }

  MetricsReport run(const std::vector<Query>& queries) {
    for (std::size_t i = 1; i < queries.size(); ++i) {
      if (queries[i].arrival < queries[i - 1].arrival) throw SimulationError("queries are not sorted by arrival");
    }
    register_loras(queries);
    report_ = {};
    report_.policy = std::string(policy_->name());
    report_.seed = config_.seed;
    report_.queries.resize(queries.size());
    queries_ = &queries;
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const Query& q = queries[i];
      if (q.output_tokens < 1) throw SimulationError("query " + std::to_string(q.id) + " has no output tokens");
      if (q.prompt_tokens < 1) throw SimulationError("query " + std::to_string(q.id) + " has an empty prompt");
      push(q.arrival, EventKind::Arrival, i);
    }
    completed_ = 0;
    running_ = 0;
    drain_left_ = config_.drain_ticks;
    sample(0.0);
    if (!queries.empty() || drain_left_ > 0) push(config_.monitor_interval, EventKind::Tick, 1);

    std::size_t quiet_ticks = 0;
    while (!events_.empty()) {
      const Event e = events_.top();
      events_.pop();
      now_ = e.time;
      const std::size_t actions_before = report_.swaps.size();
      switch (e.kind) {
        case EventKind::Arrival: {
          const Query& q = queries[e.payload];
          report_.queries[e.payload] = seed_timeline(q);
          waiting_.push_back(e.payload);
          log_actions(policy_->on_query_arrival(q, ctx()));
          quiet_ticks = 0;
          break;
        }
        case EventKind::Transfer:
          policy_->tree().complete_move(static_cast<NodeId>(e.payload));
          if (observer_.on_move_complete) observer_.on_move_complete(*policy_, static_cast<NodeId>(e.payload), now_);
          quiet_ticks = 0;
          break;
        case EventKind::FirstToken:
          if (!done_[e.payload]) policy_->on_token_generated(queries[e.payload].id, ctx());
          break;
        case EventKind::Completion:
          policy_->on_query_complete(queries[e.payload].id, ctx());
          done_[e.payload] = true;
          ++completed_;
          --running_;
          policy_->on_running_changed(running_, now_);
          quiet_ticks = 0;
          break;
        case EventKind::Tick: {
          TickResult r = policy_->on_tick(ctx());
          if (r.pinned_warning) ++report_.pinned_warnings;
          log_actions(r.actions);
          if (observer_.on_tick) observer_.on_tick(*policy_, r, now_);
          sample(now_);
          const bool pending_work = completed_ < queries.size();
          if (!pending_work && drain_left_ > 0) --drain_left_;
          if (pending_work || drain_left_ > 0) push(static_cast<double>(e.payload + 1) * config_.monitor_interval,
                                                     EventKind::Tick, e.payload + 1);
          break;
        }
      }
      try_admit();
      if (observer_.on_event) observer_.on_event(*policy_, e.kind, now_);
      if (e.kind == EventKind::Tick) {
        const bool idle = report_.swaps.size() == actions_before && running_ == 0 &&
                          policy_->tree().in_transit_count() == 0 && !waiting_.empty();
        quiet_ticks = idle ? quiet_ticks + 1 : 0;
        if (quiet_ticks > 1000) throw SimulationError("admission stalled: no query can ever fit");
      }
    }
    if (completed_ != queries.size()) throw SimulationError("simulation ended with unfinished queries");
    report_.summary = summarize(report_.queries, report_.utilization);
    queries_ = nullptr;
    return std::move(report_);
  }

  const CachePolicy& policy() const noexcept { return *policy_; }
  CachePolicy& policy() noexcept { return *policy_; }
  Channels& channels() noexcept { return channels_; }

 private:
  struct Event {
    Seconds time;
    EventKind kind;
    std::uint64_t seq;
    std::uint64_t payload;
  };
  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      if (a.time != b.time) return a.time > b.time;
      if (a.kind != b.kind) return a.kind > b.kind;
      return a.seq > b.seq;
    }
  };

  PolicyContext ctx() { return PolicyContext{channels_, now_}; }

  void push(Seconds t, EventKind k, std::uint64_t payload) { events_.push(Event{t, k, ++seq_, payload}); }

  void register_loras(const std::vector<Query>& queries) {
    std::size_t n = config_.n_lora;
    for (const Query& q : queries) n = std::max<std::size_t>(n, static_cast<std::size_t>(q.lora_id) + 1);
    for (std::size_t i = 0; i < n; ++i) {
      policy_->register_lora(static_cast<LoraId>(i), config_.lora_ranks[i % config_.lora_ranks.size()]);
    }
    done_.assign(queries.size(), false);
  }

  QueryTimeline seed_timeline(const Query& q) const {
    QueryTimeline t;
    t.query_id = q.id;
    t.session_id = q.session_id;
    t.lora_id = q.lora_id;
    t.arrival = q.arrival;
    t.prompt_tokens = q.prompt_tokens;
    t.output_tokens = q.output_tokens;
    t.prompt_blocks = static_cast<BlockCount>(q.prompt_full_blocks(config_.pool.block_tokens));
    return t;
  }

  void try_admit() {
    const std::vector<Query>& queries = *queries_;
    while (!waiting_.empty()) {
      const std::size_t idx = waiting_.front();
      const Query& q = queries[idx];
      AdmitDecision d = policy_->on_admit(q, ctx());
      log_actions(d.actions);
      if (!d.admitted) return;
      waiting_.pop_front();
      ++running_;
      policy_->on_running_changed(running_, now_);

      QueryTimeline& t = report_.queries[idx];
      t.admit_time = now_;
      t.lora_ready = d.lora_ready;
      t.kv_ready = d.kv_ready;
      t.lora_hit = d.lora_hit;
      t.hbm_hit_blocks = d.match.hbm_hit_blocks;
      t.main_hit_blocks = d.match.main_hit_blocks;
      t.miss_blocks = t.prompt_blocks - d.match.hbm_hit_blocks - d.match.main_hit_blocks;

      const Seconds after_lora = std::max(now_, d.lora_ready);
      const Seconds start = std::max(after_lora, d.kv_ready);
      const auto matched = static_cast<std::int64_t>(d.match.matched_kv.size());
      const std::int64_t missed_tokens = q.prompt_tokens - matched * config_.pool.block_tokens;
      const LatencyModel& lat = config_.latency;
      t.first_token_time = start + lat.prefill_per_token * static_cast<double>(missed_tokens) + lat.base_step;
      t.completion_time = t.first_token_time + lat.decode_per_token * static_cast<double>(q.output_tokens - 1);
      t.queue_time = now_ - t.arrival;
      t.lora_cold_start = after_lora - now_;
      t.kv_cold_start = start - after_lora;
      t.compute_time = t.first_token_time - start;
      push(t.first_token_time, EventKind::FirstToken, idx);
      push(t.completion_time, EventKind::Completion, idx);
    }
  }

  void log_actions(const std::vector<MemoryAction>& actions) {
    for (const MemoryAction& a : actions) {
      if (a.transfer.to != Residency::Absent) push(a.transfer.completes, EventKind::Transfer, a.node);
      report_.swaps.push_back(SwapRecord{now_, a.direction, a.node, policy_->tree().node(a.node).is_lora(), a.eval,
                                         a.usage_before, a.usage_after});
      if (observer_.on_issue) observer_.on_issue(*policy_, a, now_);
    }
  }

  void sample(Seconds t) {
    const HbmBreakdown b = policy_->hbm_breakdown();
    report_.utilization.push_back(UtilizationSample{t, b.lora, b.history_kv, b.running_kv, b.capacity,
                                                    policy_->tree().invalid_kv_fraction()});
  }

  SimConfig config_;
  std::unique_ptr<CachePolicy> policy_;
  SimObserver observer_;
  Channels channels_;
  std::priority_queue<Event, std::vector<Event>, Later> events_;
  std::uint64_t seq_ = 0;
  Seconds now_ = 0.0;
  const std::vector<Query>* queries_ = nullptr;
  std::deque<std::size_t> waiting_;
  std::vector<bool> done_;
  std::size_t completed_ = 0;
  std::size_t running_ = 0;
  std::size_t drain_left_ = 0;
  MetricsReport report_;
};

}  // namespace lorasim
