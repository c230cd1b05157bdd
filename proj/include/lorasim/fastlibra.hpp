// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <string_view>
#include <vector>

#include "lorasim/policy.hpp"

namespace lorasim {

/// Unified pool, dependency tree with checked moves, cost-ordered eviction
/// and a threshold swapper on every monitor tick.
class DependencyAwarePolicy final : public CachePolicy {
 public:
  DependencyAwarePolicy(const PoolConfig& pool, double lora_bytes_per_rank, CostParams cost, SwapperConfig swapper)
      : CachePolicy(pool, lora_bytes_per_rank, cost), swapper_(swapper) {}

  std::string_view name() const override { return "fastlibra"; }
  bool enforce_closure() const override { return true; }

  MainEvictionOrder main_eviction_order() override {
    return [this](const DependencyTree& tree, Seconds now) {
      std::vector<NodeId> ids = tree.main_eviction_candidates();
      const LoraDemand demand = cost_.demand(tree, now);
      std::vector<std::pair<double, NodeId>> ranked;
      ranked.reserve(ids.size());
      for (NodeId id : ids) ranked.emplace_back(cost_.eval(tree, id, demand, now), id);
      std::sort(ranked.begin(), ranked.end());
      for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = ranked[i].second;
      return ids;
    };
  }

  TickResult on_tick(PolicyContext ctx) override {
    BlockPool& pool = tree_->kv_pool();
    const SwapPlan plan = swapper_.tick(*tree_, pool, cost_, ctx.now);
    TickResult r;
    r.direction = plan.direction;
    r.pinned_warning = plan.pinned_warning;
    r.usage = plan.projected_usage;
    for (const auto& [pm, t] : swapper_.apply(plan, *tree_, ctx.channels, ctx.now, main_eviction_order())) {
      if (t) r.actions.push_back(to_action(pm, *t));
    }
    return r;
  }

  const Swapper& swapper() const noexcept { return swapper_; }

 protected:
  std::vector<PlannedMove> select_victims(BlockPool& pool, BlockCount shortfall, std::span<const NodeId> protect,
                                          Seconds now) override {
    const BlockCount target = pool.allocated(Tier::Hbm) - tree_->pending_hbm_release(pool) - shortfall;
    return greedy_leaf_out(*tree_, pool, cost_, now, protect, [&](BlockCount used) { return used > target; });
  }

  void on_matched(const Query& q, const MatchResult& m, Seconds now) override {
    cost_.stats().observe_query(q.lora_id, m.matched_kv, now);
  }

  void on_inserted(NodeId id, Seconds now) override { cost_.stats().observe_node(id, now); }

 private:
  double load_score(NodeId id, Seconds now) override {
    return cost_.eval(*tree_, id, cost_.demand(*tree_, now), now);
  }

  Swapper swapper_;
};

}  // namespace lorasim
