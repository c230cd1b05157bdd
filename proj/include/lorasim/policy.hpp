// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lorasim/block_pool.hpp"
#include "lorasim/cost_model.hpp"
#include "lorasim/dependency_tree.hpp"
#include "lorasim/query.hpp"
#include "lorasim/swapper.hpp"
#include "lorasim/types.hpp"

namespace lorasim {

/// One node move issued by a policy. `eval` is the cost-model score for the
/// dependency-aware policy and the last-visit time for the LRU policies.
struct MemoryAction {
  SwapDirection direction = SwapDirection::None;
  NodeId node = kInvalidNode;
  Residency from = Residency::Hbm;
  Residency to = Residency::Main;
  double eval = 0.0;
  double usage_before = 0.0;
  double usage_after = 0.0;
  Transfer transfer;
};

/// What a policy sees of the engine besides its own state.
struct PolicyContext {
  Channels& channels;
  Seconds now;
};

struct AdmitDecision {
  bool admitted = false;
  /// Issued while blocked (evictions) or while admitting (loads).
  std::vector<MemoryAction> actions;
  MatchResult match;
  bool lora_hit = false;
  Seconds lora_ready = 0.0;
  Seconds kv_ready = 0.0;
};

struct TickResult {
  SwapDirection direction = SwapDirection::None;
  bool pinned_warning = false;
  double usage = 0.0;
  std::vector<MemoryAction> actions;
};

struct HbmBreakdown {
  BlockCount lora = 0;
  BlockCount history_kv = 0;
  BlockCount running_kv = 0;
  BlockCount total = 0;
  BlockCount capacity = 0;
};

/// Shared engine-facing contract. Subclasses decide which history they keep,
/// which blocks they evict, and what they do on monitor ticks; admission,
/// pinning, scratch space and KV insertion are common.
class CachePolicy {
 public:
  CachePolicy(const CachePolicy&) = delete;
  CachePolicy& operator=(const CachePolicy&) = delete;
  virtual ~CachePolicy() = default;

  virtual std::string_view name() const = 0;
  virtual bool enforce_closure() const = 0;
  virtual MainEvictionOrder main_eviction_order() = 0;

  /// Creates the LoRA node and places it in main memory.
  void register_lora(LoraId lora_id, std::int64_t rank) {
    const NodeId id = tree_->ensure_lora(lora_id, rank);
    if (tree_->node(id).residency != Residency::Absent) return;
    try {
      tree_->apply_move(id, Residency::Main);
    } catch (const CapacityError&) {
      throw ConfigError("pool.main_blocks", "main memory cannot hold every LoRA adapter");
    }
    cost_.stats().set_lora_universe(tree_->lora_nodes().size());
  }

  virtual std::vector<MemoryAction> on_query_arrival(const Query& /*q*/, PolicyContext /*ctx*/) { return {}; }

  /// Tries to admit `q`. When blocked, may issue evictions and must be
  /// retried later.
  AdmitDecision on_admit(const Query& q, PolicyContext ctx) {
    AdmitDecision d;
    const auto lora = tree_->find_lora(q.lora_id);
    if (!lora) throw SimulationError("query " + std::to_string(q.id) + " uses unregistered LoRA");
    const Node& L = tree_->node(*lora);
    if (L.in_transit() && L.projected() != Residency::Hbm) return d;

    const std::int64_t bt = block_tokens();
    const auto prompt_keys = std::span<const ContentKey>(q.block_keys).first(q.prompt_full_blocks(bt));
    MatchResult m = reuse_history() ? tree_->peek_match(q.lora_id, prompt_keys) : tree_->peek_match(q.lora_id, {});
    for (NodeId id : m.matched_kv) {
      const Node& n = tree_->node(id);
      if (n.in_transit() && n.projected() != Residency::Hbm) return d;
    }

    BlockPool& lpool = tree_->lora_pool();
    BlockPool& kpool = tree_->kv_pool();
    const BlockCount scratch = q.total_blocks(bt) - static_cast<BlockCount>(m.matched_kv.size());
    BlockCount lora_need = L.projected() == Residency::Hbm ? 0 : L.size_blocks;
    BlockCount kv_need = scratch;
    for (NodeId id : m.matched_kv) {
      if (tree_->node(id).projected() != Residency::Hbm) kv_need += tree_->node(id).size_blocks;
    }

    std::vector<std::pair<BlockPool*, BlockCount>> needs;
    if (&lpool == &kpool) {
      needs.emplace_back(&lpool, lora_need + kv_need);
    } else {
      needs.emplace_back(&lpool, lora_need);
      needs.emplace_back(&kpool, kv_need);
    }
    bool fits = true;
    for (auto& [pool, need] : needs) {
      if (need > pool->capacity(Tier::Hbm)) {
        throw SimulationError("query " + std::to_string(q.id) + " needs " + std::to_string(need) +
                              " HBM blocks, more than the pool holds");
      }
      if (pool->free_blocks(Tier::Hbm) < need) fits = false;
    }
    if (!fits) {
      std::vector<NodeId> protect{*lora};
      protect.insert(protect.end(), m.matched_kv.begin(), m.matched_kv.end());
      for (auto& [pool, need] : needs) {
        const BlockCount shortfall = need - pool->free_blocks(Tier::Hbm) - tree_->pending_hbm_release(*pool);
        if (shortfall <= 0) continue;
        for (const PlannedMove& pm : select_victims(*pool, shortfall, protect, ctx.now)) {
          if (auto a = evict(pm, ctx)) d.actions.push_back(*a);
        }
      }
      return d;
    }

    m = reuse_history() ? tree_->match_query(q.lora_id, prompt_keys, ctx.now)
                        : tree_->match_query(q.lora_id, {}, ctx.now);
    on_matched(q, m, ctx.now);
    d.match = m;
    d.lora_hit = m.lora_resident;

    if (tree_->node(*lora).projected() != Residency::Hbm) d.actions.push_back(load(*lora, ctx));
    for (NodeId id : m.matched_kv) {
      if (tree_->node(id).projected() != Residency::Hbm) d.actions.push_back(load(id, ctx));
    }

    ActiveQuery aq;
    aq.query = &q;
    aq.tail = *lora;
    aq.pinned.push_back(*lora);
    tree_->pin(*lora);
    for (NodeId id : m.matched_kv) {
      tree_->pin(id);
      aq.pinned.push_back(id);
      aq.tail = id;
    }
    aq.next_block = m.matched_kv.size();
    aq.scratch = scratch;
    if (scratch > 0) kpool.allocate(Tier::Hbm, scratch, scratch_owner(q.id));
    scratch_total_ += scratch;

    d.lora_ready = ready_time(*lora, ctx.now);
    d.kv_ready = ctx.now;
    for (NodeId id : m.matched_kv) d.kv_ready = std::max(d.kv_ready, ready_time(id, ctx.now));
    d.admitted = true;
    active_.emplace(q.id, std::move(aq));
    return d;
  }

  /// Prefill finished: the prompt's missed full blocks become tree nodes.
  void on_token_generated(std::uint64_t query_id, PolicyContext ctx) {
    ActiveQuery& aq = active(query_id);
    if (aq.first_token_done) return;
    aq.first_token_done = true;
    if (reuse_history()) insert_blocks(aq, aq.query->prompt_full_blocks(block_tokens()), ctx.now);
  }

  /// Decode finished: output blocks join the tree, scratch and pins go.
  void on_query_complete(std::uint64_t query_id, PolicyContext ctx) {
    ActiveQuery& aq = active(query_id);
    if (!aq.first_token_done) on_token_generated(query_id, ctx);
    if (reuse_history()) insert_blocks(aq, aq.query->block_keys.size(), ctx.now);
    if (aq.scratch > 0) tree_->kv_pool().release(scratch_owner(query_id), Tier::Hbm);
    scratch_total_ -= aq.scratch;
    tree_->unpin(aq.pinned);
    active_.erase(query_id);
  }

  virtual TickResult on_tick(PolicyContext /*ctx*/) {
    TickResult r;
    r.usage = tree_->projected_hbm_usage(tree_->kv_pool());
    return r;
  }

  /// Running-query level feeding the batch-size estimate.
  void on_running_changed(std::size_t running, Seconds now) { cost_.stats().set_running(running, now); }

  // --- inspection ----------------------------------------------------------

  const DependencyTree& tree() const noexcept { return *tree_; }
  DependencyTree& tree() noexcept { return *tree_; }
  CostEvaluator& cost() noexcept { return cost_; }
  std::int64_t block_tokens() const noexcept { return tree_->kv_pool().config().block_tokens; }
  BlockCount scratch_blocks() const noexcept { return scratch_total_; }
  std::size_t active_queries() const noexcept { return active_.size(); }

  HbmBreakdown hbm_breakdown() const {
    HbmBreakdown b;
    const BlockPool& lp = tree_->lora_pool();
    const BlockPool& kp = tree_->kv_pool();
    for (NodeId id : tree_->lora_nodes()) {
      if (auto a = lp.find(id, Tier::Hbm)) b.lora += a->n_blocks;
    }
    b.total = lp.allocated(Tier::Hbm);
    b.capacity = lp.capacity(Tier::Hbm);
    if (!tree_->unified()) {
      b.total += kp.allocated(Tier::Hbm);
      b.capacity += kp.capacity(Tier::Hbm);
    }
    b.running_kv = scratch_total_ + tree_->pinned_kv_blocks();
    b.history_kv = b.total - b.lora - b.running_kv;
    return b;
  }

 protected:
  struct ActiveQuery {
    const Query* query = nullptr;
    NodeId tail = kInvalidNode;
    std::vector<NodeId> pinned;
    std::size_t next_block = 0;
    BlockCount scratch = 0;
    bool inserting = true;
    bool first_token_done = false;
  };

  /// Unified pool.
  CachePolicy(const PoolConfig& pool, double lora_bytes_per_rank, CostParams cost)
      : cost_(cost, pool.block_bytes, pool.pcie_bandwidth) {
    pools_.push_back(std::make_unique<BlockPool>(pool));
    tree_ = std::make_unique<DependencyTree>(*pools_[0], lora_bytes_per_rank);
  }

  /// Separate LoRA and KV pools.
  CachePolicy(const PoolConfig& lora_pool, const PoolConfig& kv_pool, double lora_bytes_per_rank, CostParams cost)
      : cost_(cost, kv_pool.block_bytes, kv_pool.pcie_bandwidth) {
    pools_.push_back(std::make_unique<BlockPool>(lora_pool));
    pools_.push_back(std::make_unique<BlockPool>(kv_pool));
    tree_ = std::make_unique<DependencyTree>(*pools_[0], *pools_[1], lora_bytes_per_rank);
  }

  virtual bool reuse_history() const { return true; }

  /// HBM nodes of `pool` to move out so that at least `shortfall` blocks
  /// are released, never touching `protect`.
  virtual std::vector<PlannedMove> select_victims(BlockPool& pool, BlockCount shortfall,
                                                  std::span<const NodeId> protect, Seconds now) = 0;

  virtual void on_matched(const Query& /*q*/, const MatchResult& /*m*/, Seconds /*now*/) {}
  virtual void on_inserted(NodeId /*id*/, Seconds /*now*/) {}

  /// Unpinned, settled HBM nodes of `pool` outside `protect`, least recently
  /// used first (deeper nodes first on equal timestamps).
  std::vector<PlannedMove> lru_victims(const BlockPool& pool, BlockCount shortfall, std::span<const NodeId> protect,
                                       bool loras_only) const {
    std::vector<NodeId> ids;
    for (NodeId id : tree_->resident_in(Residency::Hbm)) {
      const Node& n = tree_->node(id);
      if (n.in_transit() || n.pins > 0) continue;
      if (loras_only && !n.is_lora()) continue;
      if (&tree_->pool_for(n) != &pool) continue;
      if (std::find(protect.begin(), protect.end(), n.id) != protect.end()) continue;
      ids.push_back(n.id);
    }
    std::sort(ids.begin(), ids.end(), [&](NodeId a, NodeId b) { return lru_before(a, b); });
    std::vector<PlannedMove> out;
    BlockCount released = 0;
    const double cap = static_cast<double>(pool.capacity(Tier::Hbm));
    BlockCount used = pool.allocated(Tier::Hbm) - tree_->pending_hbm_release(pool);
    for (NodeId id : ids) {
      if (released >= shortfall) break;
      const Node& n = tree_->node(id);
      const double before = static_cast<double>(used) / cap;
      used -= n.size_blocks;
      released += n.size_blocks;
      out.push_back({id, Residency::Hbm, Residency::Main, n.last_visit, before, static_cast<double>(used) / cap});
    }
    return out;
  }

  bool lru_before(NodeId a, NodeId b) const {
    const Node& x = tree_->node(a);
    const Node& y = tree_->node(b);
    if (x.last_visit != y.last_visit) return x.last_visit < y.last_visit;
    if (x.depth != y.depth) return x.depth > y.depth;
    return a < b;
  }

  /// Main-memory KV leaves, least recently used first.
  std::vector<NodeId> lru_main_order() const {
    auto ids = tree_->main_eviction_candidates();
    std::sort(ids.begin(), ids.end(), [&](NodeId a, NodeId b) { return lru_before(a, b); });
    return ids;
  }

  MemoryAction to_action(const PlannedMove& pm, const Transfer& t) const {
    MemoryAction a;
    a.direction = pm.to == Residency::Hbm ? SwapDirection::In : SwapDirection::Out;
    a.node = pm.node;
    a.from = pm.from;
    a.to = t.to;
    a.eval = pm.eval;
    a.usage_before = pm.usage_before;
    a.usage_after = pm.usage_after;
    a.transfer = t;
    return a;
  }

  std::unique_ptr<DependencyTree> tree_;
  CostEvaluator cost_;

 private:
  ActiveQuery& active(std::uint64_t query_id) {
    auto it = active_.find(query_id);
    if (it == active_.end()) throw SimulationError("query " + std::to_string(query_id) + " is not running");
    return it->second;
  }

  Seconds ready_time(NodeId id, Seconds now) const {
    const Node& n = tree_->node(id);
    return n.in_transit() ? std::max(now, n.pending_ready) : now;
  }

  MemoryAction load(NodeId id, PolicyContext ctx) {
    const Node& n = tree_->node(id);
    const BlockPool& pool = tree_->pool_for(n);
    const double cap = static_cast<double>(pool.capacity(Tier::Hbm));
    const double before = static_cast<double>(pool.allocated(Tier::Hbm) - tree_->pending_hbm_release(pool)) / cap;
    PlannedMove pm{id, n.residency, Residency::Hbm, load_score(id, ctx.now), before,
                   before + static_cast<double>(n.size_blocks) / cap};
    auto t = issue_move(*tree_, ctx.channels, id, Residency::Hbm, enforce_closure(), ctx.now, main_eviction_order());
    if (!t) throw SimulationError("load of node " + std::to_string(id) + " could not be issued");
    return to_action(pm, *t);
  }

  std::optional<MemoryAction> evict(const PlannedMove& pm, PolicyContext ctx) {
    if (auto t = issue_move(*tree_, ctx.channels, pm.node, Residency::Main, enforce_closure(), ctx.now,
                            main_eviction_order())) {
      return to_action(pm, *t);
    }
    // Main memory is full of blocks that cannot be discarded: drop the node.
    const Node& n = tree_->node(pm.node);
    if (n.is_lora() || tree_->closure_check(pm.node, Residency::Absent)) return std::nullopt;
    tree_->apply_move(pm.node, Residency::Absent);
    return to_action(pm, Transfer{pm.node, Residency::Hbm, Residency::Absent, ctx.now, ctx.now});
  }

  virtual double load_score(NodeId id, Seconds /*now*/) { return tree_->node(id).last_visit; }

  void insert_blocks(ActiveQuery& aq, std::size_t upto, Seconds now) {
    const auto& keys = aq.query->block_keys;
    upto = std::min(upto, keys.size());
    while (aq.inserting && aq.next_block < upto) {
      const ContentKey key = keys[aq.next_block];
      const Node& parent = tree_->node(aq.tail);
      if (auto it = parent.children.find(key);
          it != parent.children.end() && tree_->node(it->second).projected() != Residency::Absent) {
        // Another query already cached this block; keep ours as scratch.
        aq.inserting = false;
        break;
      }
      if (aq.scratch == 0) break;
      BlockPool& kp = tree_->kv_pool();
      kp.release(scratch_owner(aq.query->id), Tier::Hbm);
      --aq.scratch;
      --scratch_total_;
      if (aq.scratch > 0) kp.allocate(Tier::Hbm, aq.scratch, scratch_owner(aq.query->id));
      const NodeId id = tree_->insert_kv(aq.tail, key, now);
      aq.pinned.push_back(id);
      aq.tail = id;
      ++aq.next_block;
      on_inserted(id, now);
    }
  }

  std::vector<std::unique_ptr<BlockPool>> pools_;
  std::unordered_map<std::uint64_t, ActiveQuery> active_;
  BlockCount scratch_total_ = 0;
};

}  // namespace lorasim
