// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lorasim/block_pool.hpp"
#include "lorasim/format.hpp"
#include "lorasim/types.hpp"

namespace lorasim {

enum class NodeKind : std::uint8_t { Root, LoraAdapter, KvBlock };

/// One vertex of the usage-dependency tree. LoRA adapters hang directly off
/// the virtual root; KV blocks live inside exactly one LoRA subtree.
///
/// `residency` is where the data currently lives. `pending` is set while a
/// transfer is in flight and names its destination; the projected residency
/// (pending if set, residency otherwise) is what planning reasons about.
struct Node {
  NodeId id = kInvalidNode;
  NodeKind kind = NodeKind::Root;
  LoraId lora_id = 0;
  std::int64_t rank = 0;
  ContentKey key = 0;
  NodeId parent = kInvalidNode;
  NodeId lora_node = kInvalidNode;
  std::uint32_t depth = 0;
  std::unordered_map<ContentKey, NodeId> children;

  Residency residency = Residency::Absent;
  std::optional<Residency> pending;
  Seconds pending_ready = 0.0;

  BlockCount size_blocks = 0;
  std::uint64_t visits = 0;
  Seconds last_visit = 0.0;
  std::uint32_t pins = 0;

  // Children whose projected residency is Hbm / not Absent.
  std::uint32_t hbm_children = 0;
  std::uint32_t live_children = 0;
  // LoRA nodes only: HBM-resident KV blocks in this subtree (actual residency).
  BlockCount subtree_hbm_kv = 0;

  bool is_lora() const noexcept { return kind == NodeKind::LoraAdapter; }
  bool is_kv() const noexcept { return kind == NodeKind::KvBlock; }
  Residency projected() const noexcept { return pending.value_or(residency); }
  bool in_transit() const noexcept { return pending.has_value(); }
};

struct MatchResult {
  bool lora_resident = false;
  NodeId lora_node = kInvalidNode;
  /// Root-to-leaf path prefix inside the LoRA subtree, one node per block.
  std::vector<NodeId> matched_kv;
  BlockCount hbm_hit_blocks = 0;
  BlockCount main_hit_blocks = 0;
  BlockCount miss_blocks = 0;
};

/// Usage-dependency tree over LoRA adapters and KV-cache blocks, backed by one
/// block pool (unified) or two (LoRA and KV partitions).
///
/// Checked moves keep the residency closure: a node is in HBM only if its
/// parent is, so swap-out proceeds leaf-first and swap-in root-first. Forced
/// moves skip that check and exist for the dependency-unaware baselines.
class DependencyTree {
 public:
  DependencyTree(BlockPool& pool, double lora_bytes_per_rank)
      : DependencyTree(pool, pool, lora_bytes_per_rank) {}

  DependencyTree(BlockPool& lora_pool, BlockPool& kv_pool, double lora_bytes_per_rank)
      : lora_pool_(&lora_pool), kv_pool_(&kv_pool), lora_bytes_per_rank_(lora_bytes_per_rank) {
    Node root;
    root.id = kRootNode;
    root.kind = NodeKind::Root;
    root.residency = Residency::Hbm;
    nodes_.push_back(std::move(root));
  }

  DependencyTree(const DependencyTree&) = delete;
  DependencyTree& operator=(const DependencyTree&) = delete;
  DependencyTree(DependencyTree&&) = default;
  DependencyTree& operator=(DependencyTree&&) = default;

  // --- structure ---------------------------------------------------------

  NodeId ensure_lora(LoraId lora_id, std::int64_t rank) {
    auto& root_children = nodes_[kRootNode].children;
    if (auto it = root_children.find(lora_id); it != root_children.end()) return it->second;
    Node n;
    n.id = static_cast<NodeId>(nodes_.size());
    n.kind = NodeKind::LoraAdapter;
    n.lora_id = lora_id;
    n.rank = rank;
    n.parent = kRootNode;
    n.lora_node = n.id;
    n.depth = 1;
    n.size_blocks = lorasim::blocks_for_lora(rank, lora_bytes_per_rank_, lora_pool_->config().block_bytes);
    n.residency = Residency::Absent;
    root_children.emplace(lora_id, n.id);
    loras_.push_back(n.id);
    nodes_.push_back(std::move(n));
    return nodes_.back().id;
  }

  std::optional<NodeId> find_lora(LoraId lora_id) const {
    const auto& root_children = nodes_[kRootNode].children;
    if (auto it = root_children.find(lora_id); it != root_children.end()) return it->second;
    return std::nullopt;
  }

  /// Longest path below the LoRA node whose successive children carry the
  /// prompt's block keys. Absent nodes end the match. Does not touch stats.
  MatchResult peek_match(LoraId lora_id, std::span<const ContentKey> prompt_blocks) const {
    MatchResult r;
    auto lora = find_lora(lora_id);
    if (!lora) throw std::logic_error("match on unknown LoRA " + std::to_string(lora_id));
    r.lora_node = *lora;
    r.lora_resident = nodes_[*lora].residency == Residency::Hbm && !nodes_[*lora].in_transit();
    NodeId cur = *lora;
    for (ContentKey key : prompt_blocks) {
      const auto& children = nodes_[cur].children;
      auto it = children.find(key);
      if (it == children.end()) break;
      const Node& child = nodes_[it->second];
      if (child.projected() == Residency::Absent) break;
      r.matched_kv.push_back(child.id);
      if (child.projected() == Residency::Hbm) {
        r.hbm_hit_blocks += child.size_blocks;
      } else {
        r.main_hit_blocks += child.size_blocks;
      }
      cur = child.id;
    }
    r.miss_blocks = static_cast<BlockCount>(prompt_blocks.size()) - static_cast<BlockCount>(r.matched_kv.size());
    return r;
  }

  /// peek_match, then records a visit on the LoRA node and every matched node.
  MatchResult match_query(LoraId lora_id, std::span<const ContentKey> prompt_blocks, Seconds now) {
    MatchResult r = peek_match(lora_id, prompt_blocks);
    touch(r.lora_node, now);
    for (NodeId id : r.matched_kv) touch(id, now);
    return r;
  }

  /// Creates (or revives an Absent) KV node below `parent`, resident in HBM
  /// with one block and pinned once for the inserting query.
  NodeId insert_kv(NodeId parent, ContentKey key, Seconds now) {
    check_id(parent);
    Node& p = nodes_[parent];
    if (p.kind == NodeKind::Root) throw ClosureViolation("KV blocks cannot attach to the virtual root");
    if (p.residency != Residency::Hbm || p.in_transit()) {
      throw ClosureViolation("insert_kv parent " + std::to_string(parent) + " is not resident in HBM");
    }
    NodeId id;
    if (auto it = p.children.find(key); it != p.children.end()) {
      id = it->second;
      if (nodes_[id].projected() != Residency::Absent) {
        throw std::logic_error("insert_kv: key already present below node " + std::to_string(parent));
      }
    } else {
      Node n;
      n.id = static_cast<NodeId>(nodes_.size());
      n.kind = NodeKind::KvBlock;
      n.lora_id = p.lora_id;
      n.key = key;
      n.parent = parent;
      n.lora_node = p.lora_node;
      n.depth = p.depth + 1;
      n.size_blocks = 1;
      n.residency = Residency::Absent;
      id = n.id;
      nodes_[parent].children.emplace(key, id);
      nodes_.push_back(std::move(n));
    }
    kv_pool_->allocate(Tier::Hbm, 1, id);
    set_projected(id, Residency::Absent, Residency::Hbm);
    set_actual(id, Residency::Hbm);
    Node& n = nodes_[id];
    n.pins = 1;
    pinned_kv_blocks_ += n.size_blocks;
    touch(id, now);
    return id;
  }

  // --- candidates ----------------------------------------------------------

  /// HBM leaves: projected in HBM, not moving, unpinned, no HBM children.
  std::vector<NodeId> swap_out_candidates() const {
    std::vector<NodeId> out;
    for (NodeId id : tier_nodes_[0]) {
      if (is_swap_out_candidate(id)) out.push_back(id);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  bool is_swap_out_candidate(NodeId id) const {
    const Node& n = nodes_[id];
    return n.kind != NodeKind::Root && !n.in_transit() && n.residency == Residency::Hbm && n.pins == 0 &&
           n.hbm_children == 0;
  }

  /// Main-memory frontier: nodes in Main whose parent is in HBM (projected)
  /// or is the virtual root.
  std::vector<NodeId> swap_in_candidates() const {
    std::vector<NodeId> out;
    for (NodeId id : tier_nodes_[1]) {
      if (is_swap_in_candidate(id)) out.push_back(id);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  bool is_swap_in_candidate(NodeId id) const {
    const Node& n = nodes_[id];
    if (n.kind == NodeKind::Root || n.in_transit() || n.residency != Residency::Main) return false;
    return n.parent == kRootNode || nodes_[n.parent].projected() == Residency::Hbm;
  }

  /// Main-memory KV leaves eligible for discarding when the main tier is full.
  std::vector<NodeId> main_eviction_candidates() const {
    std::vector<NodeId> out;
    for (NodeId id : tier_nodes_[1]) {
      const Node& n = nodes_[id];
      if (n.is_kv() && !n.in_transit() && n.live_children == 0 && n.pins == 0) out.push_back(id);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  /// Nodes whose actual residency is `r` (Hbm or Main), in no particular order.
  std::span<const NodeId> resident_in(Residency r) const {
    if (r == Residency::Absent) throw std::invalid_argument("Absent nodes are not tracked");
    return tier_nodes_[r == Residency::Hbm ? 0 : 1];
  }

  // --- moves ---------------------------------------------------------------

  /// Empty when moving `id` to `to` keeps the residency closure; otherwise the
  /// reason it would not.
  std::optional<std::string> closure_check(NodeId id, Residency to) const {
    check_id(id);
    const Node& n = nodes_[id];
    if (n.kind == NodeKind::Root) return "the virtual root cannot move";
    if (n.in_transit()) return "node " + std::to_string(id) + " already has a move in flight";
    if (n.residency == to) return "node " + std::to_string(id) + " is already " + std::string(to_string(to));
    if (to == Residency::Hbm) {
      if (n.parent != kRootNode && nodes_[n.parent].projected() != Residency::Hbm) {
        return "parent " + std::to_string(n.parent) + " of node " + std::to_string(id) + " is not in HBM";
      }
    }
    if (to == Residency::Main && n.parent != kRootNode && nodes_[n.parent].projected() == Residency::Absent) {
      return "parent " + std::to_string(n.parent) + " of node " + std::to_string(id) + " was discarded";
    }
    if (n.residency == Residency::Hbm) {
      if (n.hbm_children > 0) return "node " + std::to_string(id) + " still has HBM-resident children";
      if (n.pins > 0) return "node " + std::to_string(id) + " is pinned";
    }
    if (to == Residency::Absent && n.live_children > 0) {
      return "node " + std::to_string(id) + " still has resident descendants";
    }
    return std::nullopt;
  }

  /// Starts a move: reserves blocks in the destination tier and marks the node
  /// in transit. The source blocks stay held until complete_move.
  void begin_move(NodeId id, Residency to, bool enforce_closure) {
    if (enforce_closure) {
      if (auto why = closure_check(id, to)) throw ClosureViolation(*why);
    } else {
      check_id(id);
      const Node& n = nodes_[id];
      if (n.kind == NodeKind::Root) throw ClosureViolation("the virtual root cannot move");
      if (n.in_transit()) throw ClosureViolation("node " + std::to_string(id) + " already has a move in flight");
      if (n.residency == to) throw ClosureViolation("node " + std::to_string(id) + " is already there");
      if (n.residency == Residency::Hbm && n.pins > 0) throw ClosureViolation("node " + std::to_string(id) + " is pinned");
    }
    Node& n = nodes_[id];
    BlockPool& pool = pool_for(n);
    if (to != Residency::Absent) pool.allocate(to == Residency::Hbm ? Tier::Hbm : Tier::Main, n.size_blocks, id);
    if (n.residency == Residency::Hbm) pending_release_[pool_slot(n)] += n.size_blocks;
    const Residency before = n.projected();
    n.pending = to;
    n.pending_ready = 0.0;
    ++in_transit_;
    set_projected(id, before, to);
  }

  void complete_move(NodeId id) {
    check_id(id);
    Node& n = nodes_[id];
    if (!n.in_transit()) throw std::logic_error("complete_move on node " + std::to_string(id) + " with nothing in flight");
    const Residency to = *n.pending;
    BlockPool& pool = pool_for(n);
    if (n.residency == Residency::Hbm) {
      pool.release(id, Tier::Hbm);
      pending_release_[pool_slot(n)] -= n.size_blocks;
    } else if (n.residency == Residency::Main) {
      pool.release(id, Tier::Main);
    }
    n.pending.reset();
    --in_transit_;
    set_actual(id, to);
  }

  void set_pending_ready(NodeId id, Seconds t) { nodes_.at(id).pending_ready = t; }

  /// Synchronous move that enforces the residency closure.
  void apply_move(NodeId id, Residency to) {
    begin_move(id, to, true);
    complete_move(id);
  }

  /// Synchronous move without the closure check (dependency-unaware policies).
  void force_move(NodeId id, Residency to) {
    begin_move(id, to, false);
    complete_move(id);
  }

  // --- pins ----------------------------------------------------------------

  void pin(NodeId id) {
    check_id(id);
    Node& n = nodes_[id];
    if (n.projected() != Residency::Hbm) throw std::logic_error("pin on node " + std::to_string(id) + " outside HBM");
    if (n.pins++ == 0 && n.is_kv()) pinned_kv_blocks_ += n.size_blocks;
  }

  void unpin(std::span<const NodeId> ids) {
    for (NodeId id : ids) {
      check_id(id);
      if (nodes_[id].pins == 0) throw UnderflowError("unpin on node " + std::to_string(id) + " with no pins");
    }
    for (NodeId id : ids) {
      Node& n = nodes_[id];
      if (--n.pins == 0 && n.is_kv()) pinned_kv_blocks_ -= n.size_blocks;
    }
  }

  void unpin(NodeId id) { unpin(std::span<const NodeId>(&id, 1)); }

  // --- audits --------------------------------------------------------------

  /// HBM-resident KV blocks whose LoRA is not HBM-resident, over all
  /// HBM-resident KV blocks. Maintained incrementally.
  double invalid_kv_fraction() const noexcept {
    if (hbm_kv_blocks_ == 0) return 0.0;
    return static_cast<double>(invalid_kv_blocks_) / static_cast<double>(hbm_kv_blocks_);
  }

  BlockCount hbm_kv_blocks() const noexcept { return hbm_kv_blocks_; }
  BlockCount invalid_kv_blocks() const noexcept { return invalid_kv_blocks_; }

  /// HBM blocks that in-flight moves out of HBM will release, for `pool`.
  BlockCount pending_hbm_release(const BlockPool& pool) const noexcept {
    BlockCount sum = 0;
    if (&pool == lora_pool_) sum += pending_release_[0];
    if (&pool == kv_pool_) sum += pending_release_[1];
    return sum;
  }

  /// Pool usage with in-flight swap-outs already counted as released.
  double projected_hbm_usage(const BlockPool& pool) const noexcept {
    const BlockCount cap = pool.capacity(Tier::Hbm);
    return static_cast<double>(pool.allocated(Tier::Hbm) - pending_hbm_release(pool)) / static_cast<double>(cap);
  }

  std::size_t in_transit_count() const noexcept { return in_transit_; }

  /// Blocks of KV nodes pinned by at least one running query.
  BlockCount pinned_kv_blocks() const noexcept { return pinned_kv_blocks_; }

  // --- access --------------------------------------------------------------

  const Node& node(NodeId id) const {
    check_id(id);
    return nodes_[id];
  }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<NodeId>& lora_nodes() const noexcept { return loras_; }

  BlockPool& pool_for(const Node& n) { return n.is_lora() ? *lora_pool_ : *kv_pool_; }
  const BlockPool& pool_for(const Node& n) const { return n.is_lora() ? *lora_pool_ : *kv_pool_; }
  BlockPool& lora_pool() noexcept { return *lora_pool_; }
  BlockPool& kv_pool() noexcept { return *kv_pool_; }
  const BlockPool& lora_pool() const noexcept { return *lora_pool_; }
  const BlockPool& kv_pool() const noexcept { return *kv_pool_; }
  bool unified() const noexcept { return lora_pool_ == kv_pool_; }

  /// LoRA nodes with projected residency HBM.
  std::size_t hbm_lora_count() const {
    std::size_t c = 0;
    for (NodeId id : loras_) c += nodes_[id].projected() == Residency::Hbm ? 1 : 0;
    return c;
  }

  /// Line-oriented dump: id, kind, parent, residency, visits, last_visit.
  void dump(std::ostream& os) const {
    for (const Node& n : nodes_) {
      os << n.id << '\t';
      switch (n.kind) {
        case NodeKind::Root:
          os << "root";
          break;
        case NodeKind::LoraAdapter:
          os << "lora:" << n.lora_id << ":r" << n.rank;
          break;
        case NodeKind::KvBlock:
          os << "kv:" << format_hex(n.key);
          break;
      }
      os << '\t' << (n.parent == kInvalidNode ? std::string("-") : std::to_string(n.parent)) << '\t'
         << to_string(n.residency) << '\t' << n.visits << '\t' << format_double(n.last_visit) << '\n';
    }
  }

 private:
  void check_id(NodeId id) const {
    if (id >= nodes_.size()) throw std::out_of_range("unknown node " + std::to_string(id));
  }

  std::size_t pool_slot(const Node& n) const noexcept { return n.is_lora() ? 0 : 1; }

  void track(NodeId id, Residency r) {
    if (r == Residency::Absent) return;
    auto& list = tier_nodes_[r == Residency::Hbm ? 0 : 1];
    if (tier_pos_.size() < nodes_.size()) tier_pos_.resize(nodes_.size());
    tier_pos_[id] = static_cast<std::uint32_t>(list.size());
    list.push_back(id);
  }

  void untrack(NodeId id, Residency r) {
    if (r == Residency::Absent) return;
    auto& list = tier_nodes_[r == Residency::Hbm ? 0 : 1];
    const std::uint32_t pos = tier_pos_[id];
    list[pos] = list.back();
    tier_pos_[list[pos]] = pos;
    list.pop_back();
  }

  void touch(NodeId id, Seconds now) {
    Node& n = nodes_[id];
    ++n.visits;
    n.last_visit = now;
  }

  void set_projected(NodeId id, Residency before, Residency after) {
    const Node& n = nodes_[id];
    if (n.parent == kInvalidNode || before == after) return;
    Node& p = nodes_[n.parent];
    if (before == Residency::Hbm) --p.hbm_children;
    if (after == Residency::Hbm) ++p.hbm_children;
    if (before != Residency::Absent) --p.live_children;
    if (after != Residency::Absent) ++p.live_children;
  }

  void set_actual(NodeId id, Residency to) {
    Node& n = nodes_[id];
    const Residency from = n.residency;
    n.residency = to;
    if (from == to) return;
    untrack(id, from);
    track(id, to);
    if (n.is_kv()) {
      Node& lora = nodes_[n.lora_node];
      const bool lora_hbm = lora.residency == Residency::Hbm;
      if (from == Residency::Hbm) {
        lora.subtree_hbm_kv -= n.size_blocks;
        hbm_kv_blocks_ -= n.size_blocks;
        if (!lora_hbm) invalid_kv_blocks_ -= n.size_blocks;
      }
      if (to == Residency::Hbm) {
        lora.subtree_hbm_kv += n.size_blocks;
        hbm_kv_blocks_ += n.size_blocks;
        if (!lora_hbm) invalid_kv_blocks_ += n.size_blocks;
      }
    } else if (n.is_lora()) {
      if (from == Residency::Hbm) invalid_kv_blocks_ += n.subtree_hbm_kv;
      if (to == Residency::Hbm) invalid_kv_blocks_ -= n.subtree_hbm_kv;
    }
  }

  BlockPool* lora_pool_;
  BlockPool* kv_pool_;
  double lora_bytes_per_rank_;
  std::vector<Node> nodes_;
  std::vector<NodeId> loras_;
  BlockCount pending_release_[2] = {0, 0};
  BlockCount hbm_kv_blocks_ = 0;
  BlockCount invalid_kv_blocks_ = 0;
  std::size_t in_transit_ = 0;
  BlockCount pinned_kv_blocks_ = 0;
  std::vector<NodeId> tier_nodes_[2];
  std::vector<std::uint32_t> tier_pos_;
};

}  // namespace lorasim
