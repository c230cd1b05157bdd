// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lorasim/dependency_tree.hpp"
#include "lorasim/types.hpp"

namespace lorasim {

/// Where a KV node's visit probability comes from.
enum class ProbSource : std::uint8_t { Node, Lora };

/// Which nodes the LoRA-quantity reward multiplies.
enum class RewardScope : std::uint8_t { LoraOnly, AllNodes };

struct CostParams {
  Seconds bs_window = 5.0;
  Seconds freq_window = 60.0;
  Seconds sigmoid_midpoint = 60.0;
  Seconds sigmoid_scale = 15.0;
  double smoothing = 1.0;
  ProbSource prob_source = ProbSource::Node;
  RewardScope lora_reward_scope = RewardScope::LoraOnly;

  void validate() const {
    if (!(bs_window > 0)) throw ConfigError("cost.bs_window", "must be > 0");
    if (!(freq_window > 0)) throw ConfigError("cost.freq_window", "must be > 0");
    if (!(sigmoid_midpoint > 0)) throw ConfigError("cost.sigmoid_midpoint", "must be > 0");
    if (!(sigmoid_scale > 0)) throw ConfigError("cost.sigmoid_scale", "must be > 0");
    if (!(smoothing > 0)) throw ConfigError("cost.smoothing", "must be > 0");
  }
};

struct NodeView {
  bool is_lora = false;
  double size_bytes = 0.0;
  double prob = 0.0;
  Seconds t_since_visit = 0.0;
  /// size_bytes / pcie_bandwidth.
  Seconds transfer_cost = 0.0;
};

struct LoraDemand {
  double low_lora = 0.0;
  std::size_t now_lora = 0;
};

/// Expected number of distinct LoRAs in a batch of `bs` queries:
/// sum_i 1 - (1 - p_i)^bs.
inline double expected_lora_count(std::span<const double> probs, double bs) {
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("probability outside [0,1]: " + std::to_string(p));
    sum += 1.0 - std::pow(1.0 - p, bs);
  }
  return sum;
}

/// Reward for keeping LoRAs when fewer are loaded than demanded; 1 once
/// enough are resident.
inline double lora_reward(double low_lora, std::size_t now_lora) {
  const double denom = static_cast<double>(std::max<std::size_t>(now_lora, 1));
  return std::max(1.0, low_lora / denom);
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Expected cold-start time saved by keeping the node in HBM, decayed by time
/// since its last visit.
inline double retain_eval(const NodeView& view, const CostParams& params) {
  const double decay = 1.0 - logistic((view.t_since_visit - params.sigmoid_midpoint) / params.sigmoid_scale);
  return view.transfer_cost * view.prob * decay;
}

/// Higher means more valuable to keep in (or bring into) HBM.
inline double eval(const NodeView& view, const LoraDemand& demand, const CostParams& params) {
  const double retain = retain_eval(view, params);
  if (view.is_lora || params.lora_reward_scope == RewardScope::AllNodes) {
    return retain * lora_reward(demand.low_lora, demand.now_lora);
  }
  return retain;
}

/// Sliding-window visit counters and the running-query level used for BS.
class UsageStats {
 public:
  explicit UsageStats(CostParams params = {}) : params_(params) {}

  const CostParams& params() const noexcept { return params_; }

  /// Number of LoRAs in the smoothing denominator.
  void set_lora_universe(std::size_t n) { n_lora_ = n; }
  std::size_t lora_universe() const noexcept { return n_lora_; }

  void observe_query(LoraId lora_id, std::span<const NodeId> matched, Seconds now) {
    advance(now);
    events_.push_back({now, Event::Kind::Query, lora_id, 0});
    ++lora_counts_[lora_id];
    ++total_;
    for (NodeId id : matched) observe_node(id, now);
  }

  void observe_node(NodeId id, Seconds now) {
    advance(now);
    events_.push_back({now, Event::Kind::Node, 0, id});
    ++node_counts_[id];
  }

  /// Records the number of concurrently running queries from `now` on.
  void set_running(std::size_t count, Seconds now) {
    if (!levels_.empty() && levels_.back().first == now) {
      levels_.back().second = count;
    } else {
      levels_.emplace_back(now, count);
    }
    prune_levels(now);
  }

  /// Time-weighted mean running count over the trailing bs_window.
  double current_bs(Seconds now) {
    prune_levels(now);
    if (levels_.empty()) return 0.0;
    const Seconds start = std::max(0.0, now - params_.bs_window);
    const Seconds span = now - start;
    if (span <= 0.0) return static_cast<double>(levels_.back().second);
    double area = 0.0;
    for (std::size_t i = 0; i < levels_.size(); ++i) {
      const Seconds a = std::max(start, levels_[i].first);
      const Seconds b = i + 1 < levels_.size() ? std::min(now, levels_[i + 1].first) : now;
      if (b > a) area += static_cast<double>(levels_[i].second) * (b - a);
    }
    return area / span;
  }

  double lora_prob(LoraId lora_id, Seconds now) {
    advance(now);
    auto it = lora_counts_.find(lora_id);
    const double count = it == lora_counts_.end() ? 0.0 : static_cast<double>(it->second);
    return smoothed(count);
  }

  double node_prob(NodeId id, Seconds now) {
    advance(now);
    auto it = node_counts_.find(id);
    const double count = it == node_counts_.end() ? 0.0 : static_cast<double>(it->second);
    return smoothed(count);
  }

  std::uint64_t total_in_window(Seconds now) {
    advance(now);
    return total_;
  }

  void advance(Seconds now) {
    const Seconds cutoff = now - params_.freq_window;
    while (!events_.empty() && events_.front().time < cutoff) {
      const Event& e = events_.front();
      if (e.kind == Event::Kind::Query) {
        decrement(lora_counts_, e.lora);
        --total_;
      } else {
        decrement(node_counts_, e.node);
      }
      events_.pop_front();
    }
  }

 private:
  struct Event {
    enum class Kind : std::uint8_t { Query, Node };
    Seconds time;
    Kind kind;
    LoraId lora;
    NodeId node;
  };

  template <typename Map, typename Key>
  static void decrement(Map& m, const Key& k) {
    auto it = m.find(k);
    if (it == m.end()) return;
    if (--it->second == 0) m.erase(it);
  }

  double smoothed(double count) const {
    const double denom = static_cast<double>(total_) + params_.smoothing * static_cast<double>(std::max<std::size_t>(n_lora_, 1));
    return std::min(1.0, (count + params_.smoothing) / denom);
  }

  void prune_levels(Seconds now) {
    const Seconds start = now - params_.bs_window;
    while (levels_.size() >= 2 && levels_[1].first <= start) levels_.pop_front();
  }

  CostParams params_;
  std::size_t n_lora_ = 0;
  std::deque<Event> events_;
  std::unordered_map<LoraId, std::uint64_t> lora_counts_;
  std::unordered_map<NodeId, std::uint64_t> node_counts_;
  std::uint64_t total_ = 0;
  std::deque<std::pair<Seconds, std::size_t>> levels_;
};

/// Binds the cost formulas to live tree state.
class CostEvaluator {
 public:
  CostEvaluator(CostParams params, double block_bytes, double pcie_bandwidth)
      : stats_(params), block_bytes_(block_bytes), bandwidth_(pcie_bandwidth) {}

  UsageStats& stats() noexcept { return stats_; }
  const CostParams& params() const noexcept { return stats_.params(); }

  NodeView view(const DependencyTree& tree, NodeId id, Seconds now) {
    const Node& n = tree.node(id);
    NodeView v;
    v.is_lora = n.is_lora();
    v.size_bytes = static_cast<double>(n.size_blocks) * block_bytes_;
    v.transfer_cost = v.size_bytes / bandwidth_;
    v.t_since_visit = std::max(0.0, now - n.last_visit);
    if (n.is_lora() || params().prob_source == ProbSource::Lora) {
      v.prob = stats_.lora_prob(n.lora_id, now);
    } else {
      v.prob = stats_.node_prob(id, now);
    }
    return v;
  }

  LoraDemand demand(const DependencyTree& tree, Seconds now) {
    std::vector<double> probs;
    probs.reserve(tree.lora_nodes().size());
    for (NodeId id : tree.lora_nodes()) probs.push_back(stats_.lora_prob(tree.node(id).lora_id, now));
    LoraDemand d;
    d.low_lora = expected_lora_count(probs, stats_.current_bs(now));
    d.now_lora = tree.hbm_lora_count();
    return d;
  }

  double eval(const DependencyTree& tree, NodeId id, const LoraDemand& demand, Seconds now) {
    return lorasim::eval(view(tree, id, now), demand, params());
  }

 private:
  UsageStats stats_;
  double block_bytes_;
  double bandwidth_;
};

}  // namespace lorasim
