// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <functional>
#include <optional>
#include <queue>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lorasim/block_pool.hpp"
#include "lorasim/cost_model.hpp"
#include "lorasim/dependency_tree.hpp"
#include "lorasim/types.hpp"

namespace lorasim {

/// FIFO transfer channel for one PCIe direction.
class TransferChannel {
 public:
  TransferChannel() = default;
  TransferChannel(double block_bytes, double bandwidth) : seconds_per_block_(block_bytes / bandwidth) {}

  /// Queues `n` blocks; returns the completion time.
  Seconds enqueue(Seconds now, BlockCount n) {
    const Seconds start = std::max(now, busy_until_);
    busy_until_ = start + static_cast<double>(n) * seconds_per_block_;
    return busy_until_;
  }

  Seconds busy_until() const noexcept { return busy_until_; }
  Seconds seconds_per_block() const noexcept { return seconds_per_block_; }

 private:
  Seconds seconds_per_block_ = 0.0;
  Seconds busy_until_ = 0.0;
};

struct Channels {
  TransferChannel to_hbm;
  TransferChannel to_main;

  explicit Channels(const PoolConfig& cfg)
      : to_hbm(cfg.block_bytes, cfg.pcie_bandwidth), to_main(cfg.block_bytes, cfg.pcie_bandwidth) {}
};

struct SwapperConfig {
  Seconds monitor_interval = 0.1;
  double upper_threshold = 0.95;
  double lower_threshold = 0.70;
  /// When false, a tick with transfers still in flight plans nothing.
  bool plan_during_transfer = true;

  void validate() const {
    if (!(monitor_interval > 0)) throw ConfigError("swapper.monitor_interval", "must be > 0");
    if (!(lower_threshold > 0.0 && lower_threshold < 1.0)) {
      throw ConfigError("swapper.lower_threshold", "must lie in (0,1)");
    }
    if (!(upper_threshold > 0.0 && upper_threshold < 1.0)) {
      throw ConfigError("swapper.upper_threshold", "must lie in (0,1)");
    }
    if (!(lower_threshold < upper_threshold)) {
      throw ConfigError("swapper.lower_threshold", "lower_threshold must be below upper_threshold");
    }
  }
};

enum class SwapDirection : std::uint8_t { None, In, Out };

inline constexpr std::string_view to_string(SwapDirection d) {
  switch (d) {
    case SwapDirection::None:
      return "None";
    case SwapDirection::In:
      return "In";
    case SwapDirection::Out:
      return "Out";
  }
  return "?";
}

struct PlannedMove {
  NodeId node = kInvalidNode;
  Residency from = Residency::Hbm;
  Residency to = Residency::Main;
  double eval = 0.0;
  double usage_before = 0.0;
  double usage_after = 0.0;
};

struct SwapPlan {
  SwapDirection direction = SwapDirection::None;
  std::vector<PlannedMove> moves;
  double projected_usage = 0.0;
  /// Out was needed but every HBM leaf was pinned or moving.
  bool pinned_warning = false;
};

struct Transfer {
  NodeId node = kInvalidNode;
  Residency from = Residency::Hbm;
  Residency to = Residency::Main;
  Seconds issued = 0.0;
  Seconds completes = 0.0;
};

/// Orders Main-resident KV leaves for discarding when the main tier is full.
using MainEvictionOrder = std::function<std::vector<NodeId>(const DependencyTree&, Seconds)>;

/// Extra main-memory room freed whenever the main tier has to discard, as a
/// fraction of its capacity. Batches the ordering work.
inline constexpr double kMainDiscardSlack = 0.02;

/// Starts a move and books it on the matching channel. Swap-outs make room in
/// the main tier first by discarding main-memory leaves in `main_order`.
/// Returns nullopt when the move is no longer legal or does not fit.
inline std::optional<Transfer> issue_move(DependencyTree& tree, Channels& channels, NodeId id, Residency to,
                                          bool enforce_closure, Seconds now, const MainEvictionOrder& main_order) {
  const Node& n = tree.node(id);
  const Residency from = n.residency;
  if (n.in_transit() || from == to) return std::nullopt;
  if (enforce_closure && tree.closure_check(id, to)) return std::nullopt;
  BlockPool& pool = tree.pool_for(n);
  const BlockCount size = n.size_blocks;
  if (to == Residency::Hbm && pool.free_blocks(Tier::Hbm) < size) return std::nullopt;
  if (to == Residency::Main) {
    const auto slack = static_cast<BlockCount>(static_cast<double>(pool.capacity(Tier::Main)) * kMainDiscardSlack);
    const BlockCount target = std::min(size + slack, pool.capacity(Tier::Main));
    while (pool.free_blocks(Tier::Main) < size) {
      if (!main_order) return std::nullopt;
      auto victims = main_order(tree, now);
      std::erase(victims, id);
      bool progressed = false;
      for (NodeId v : victims) {
        if (pool.free_blocks(Tier::Main) >= target) break;
        if (&tree.pool_for(tree.node(v)) != &pool || tree.closure_check(v, Residency::Absent)) continue;
        tree.apply_move(v, Residency::Absent);
        progressed = true;
      }
      if (!progressed) return std::nullopt;
    }
  }
  try {
    tree.begin_move(id, to, enforce_closure);
  } catch (const ClosureViolation&) {
    return std::nullopt;
  } catch (const CapacityError&) {
    return std::nullopt;
  }
  Transfer t{id, from, to, now, now};
  if (to == Residency::Hbm) {
    t.completes = channels.to_hbm.enqueue(now, size);
  } else if (to == Residency::Main && from == Residency::Hbm) {
    t.completes = channels.to_main.enqueue(now, size);
  }
  tree.set_pending_ready(id, t.completes);
  return t;
}

/// Greedy leaf-first swap-out in ascending eval (ties by ascending id). After
/// each pop, a parent whose HBM children have all been selected becomes a
/// candidate itself. Continues while `more(projected_used_blocks)` holds.
template <typename More>
std::vector<PlannedMove> greedy_leaf_out(const DependencyTree& tree, const BlockPool& pool, CostEvaluator& cost,
                                         Seconds now, std::span<const NodeId> exclude, More&& more) {
  struct Ranked {
    double eval;
    NodeId id;
  };
  auto excluded = [&](NodeId id) { return std::find(exclude.begin(), exclude.end(), id) != exclude.end(); };
  const LoraDemand demand = cost.demand(tree, now);
  auto cmp = [](const Ranked& a, const Ranked& b) { return a.eval > b.eval || (a.eval == b.eval && a.id > b.id); };
  std::priority_queue<Ranked, std::vector<Ranked>, decltype(cmp)> heap(cmp);
  for (NodeId id : tree.swap_out_candidates()) {
    if (&tree.pool_for(tree.node(id)) != &pool || excluded(id)) continue;
    heap.push({cost.eval(tree, id, demand, now), id});
  }
  std::vector<PlannedMove> moves;
  const double cap = static_cast<double>(pool.capacity(Tier::Hbm));
  BlockCount used = pool.allocated(Tier::Hbm) - tree.pending_hbm_release(pool);
  std::unordered_map<NodeId, std::uint32_t> leaving_children;
  while (!heap.empty() && more(used)) {
    const Ranked top = heap.top();
    heap.pop();
    const Node& n = tree.node(top.id);
    const double before = static_cast<double>(used) / cap;
    used -= n.size_blocks;
    moves.push_back({top.id, Residency::Hbm, Residency::Main, top.eval, before, static_cast<double>(used) / cap});
    if (n.parent == kRootNode) continue;
    const Node& p = tree.node(n.parent);
    const std::uint32_t gone = ++leaving_children[p.id];
    if (gone == p.hbm_children && !p.in_transit() && p.residency == Residency::Hbm && p.pins == 0 &&
        &tree.pool_for(p) == &pool && !excluded(p.id)) {
      heap.push({cost.eval(tree, p.id, demand, now), p.id});
    }
  }
  return moves;
}

/// Threshold monitor producing greedy, cost-ordered swap plans.
class Swapper {
 public:
  explicit Swapper(SwapperConfig config = {}) : config_(config) { config_.validate(); }

  const SwapperConfig& config() const noexcept { return config_; }

  SwapPlan tick(const DependencyTree& tree, const BlockPool& pool, CostEvaluator& cost, Seconds now) const {
    SwapPlan plan;
    const double usage = tree.projected_hbm_usage(pool);
    plan.projected_usage = usage;
    if (!config_.plan_during_transfer && tree.in_transit_count() > 0) return plan;
    if (usage > config_.upper_threshold) {
      plan.direction = SwapDirection::Out;
      plan_out(tree, pool, cost, now, plan);
    } else if (usage < config_.lower_threshold) {
      plan.direction = SwapDirection::In;
      plan_in(tree, pool, cost, now, plan);
      // Nothing left to bring in counts as balanced.
      if (plan.moves.empty()) plan.direction = SwapDirection::None;
    }
    return plan;
  }

  /// Issues every move of `plan` in order; stale moves are skipped and come
  /// back with an empty transfer.
  std::vector<std::pair<PlannedMove, std::optional<Transfer>>> apply(const SwapPlan& plan, DependencyTree& tree,
                                                                      Channels& channels, Seconds now,
                                                                      const MainEvictionOrder& main_order) const {
    std::vector<std::pair<PlannedMove, std::optional<Transfer>>> out;
    out.reserve(plan.moves.size());
    for (const PlannedMove& m : plan.moves) {
      out.emplace_back(m, issue_move(tree, channels, m.node, m.to, true, now, main_order));
    }
    return out;
  }

 private:
  struct Ranked {
    double eval;
    NodeId id;
  };

  void plan_out(const DependencyTree& tree, const BlockPool& pool, CostEvaluator& cost, Seconds now,
                SwapPlan& plan) const {
    const double cap = static_cast<double>(pool.capacity(Tier::Hbm));
    const double upper = config_.upper_threshold;
    plan.moves = greedy_leaf_out(tree, pool, cost, now, {},
                                 [&](BlockCount used) { return static_cast<double>(used) / cap > upper; });
    if (plan.moves.empty()) {
      plan.pinned_warning = true;
      return;
    }
    plan.projected_usage = plan.moves.back().usage_after;
  }

  void plan_in(const DependencyTree& tree, const BlockPool& pool, CostEvaluator& cost, Seconds now,
               SwapPlan& plan) const {
    const LoraDemand demand = cost.demand(tree, now);
    // Max-eval first, ties by ascending id.
    auto cmp = [](const Ranked& a, const Ranked& b) { return a.eval < b.eval || (a.eval == b.eval && a.id > b.id); };
    std::priority_queue<Ranked, std::vector<Ranked>, decltype(cmp)> heap(cmp);
    for (NodeId id : tree.swap_in_candidates()) {
      if (&tree.pool_for(tree.node(id)) != &pool) continue;
      heap.push({cost.eval(tree, id, demand, now), id});
    }
    const double cap = static_cast<double>(pool.capacity(Tier::Hbm));
    double used = static_cast<double>(pool.allocated(Tier::Hbm) - tree.pending_hbm_release(pool));
    BlockCount free_now = pool.free_blocks(Tier::Hbm);
    while (!heap.empty() && used / cap < config_.lower_threshold) {
      const Ranked top = heap.top();
      const Node& n = tree.node(top.id);
      // Never evict to make room and never push usage past the busy line.
      if (n.size_blocks > free_now || (used + static_cast<double>(n.size_blocks)) / cap > config_.upper_threshold) {
        break;
      }
      heap.pop();
      const double before = used / cap;
      used += static_cast<double>(n.size_blocks);
      free_now -= n.size_blocks;
      plan.moves.push_back({top.id, Residency::Main, Residency::Hbm, top.eval, before, used / cap});
      for (const auto& [key, child_id] : n.children) {
        const Node& c = tree.node(child_id);
        if (!c.in_transit() && c.residency == Residency::Main && &tree.pool_for(c) == &pool) {
          heap.push({cost.eval(tree, child_id, demand, now), child_id});
        }
      }
    }
    plan.projected_usage = used / cap;
  }

  SwapperConfig config_;
};

}  // namespace lorasim
