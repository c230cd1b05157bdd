// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <set>

#include "lorasim/swapper.hpp"
#include "support/audit.hpp"

namespace lorasim {
namespace {

constexpr double kBlockBytes = 1024.0;
constexpr double kBandwidth = 1e9;

// 100 HBM blocks, LoRA rank == LoRA blocks.
class SwapperTest : public ::testing::Test {
 protected:
  SwapperTest()
      : pool_(PoolConfig{100, 1000, 32, kBlockBytes, kBandwidth}),
        tree_(pool_, kBlockBytes),
        cost_(CostParams{}, kBlockBytes, kBandwidth),
        channels_(pool_.config()) {}

  NodeId lora(LoraId id, std::int64_t blocks, Residency where) {
    const NodeId n = tree_.ensure_lora(id, blocks);
    tree_.apply_move(n, where);
    cost_.stats().set_lora_universe(tree_.lora_nodes().size());
    return n;
  }

  void complete_all() {
    for (const Node& n : tree_.nodes()) {
      if (n.in_transit()) tree_.complete_move(n.id);
    }
  }

  BlockPool pool_;
  DependencyTree tree_;
  CostEvaluator cost_;
  Channels channels_;
  Swapper swapper_;
};

TEST_F(SwapperTest, BalancedUsagePlansNothing) {
  lora(0, 80, Residency::Hbm);
  const SwapPlan p = swapper_.tick(tree_, pool_, cost_, 1.0);
  EXPECT_EQ(p.direction, SwapDirection::None);
  EXPECT_TRUE(p.moves.empty());
  EXPECT_DOUBLE_EQ(p.projected_usage, 0.8);
}

TEST_F(SwapperTest, OutTakesLowestEvalLeaf) {
  const NodeId a = lora(0, 49, Residency::Hbm);
  const NodeId b = lora(1, 49, Residency::Hbm);
  // Shares (0+1)/10 and (8+1)/10.
  for (int i = 0; i < 8; ++i) cost_.stats().observe_query(1, {}, 0.0);
  const LoraDemand d = cost_.demand(tree_, 0.0);
  const double ea = cost_.eval(tree_, a, d, 0.0);
  const double eb = cost_.eval(tree_, b, d, 0.0);
  EXPECT_NEAR(eb / ea, 9.0, 1e-9);
  const SwapPlan p = swapper_.tick(tree_, pool_, cost_, 0.0);
  EXPECT_EQ(p.direction, SwapDirection::Out);
  ASSERT_EQ(p.moves.size(), 1u);
  EXPECT_EQ(p.moves[0].node, a);
  EXPECT_DOUBLE_EQ(p.moves[0].usage_before, 0.98);
  EXPECT_DOUBLE_EQ(p.moves[0].usage_after, 0.49);
  EXPECT_DOUBLE_EQ(p.moves[0].eval, ea);
}

TEST_F(SwapperTest, InFillsFrontierByDescendingEval) {
  lora(0, 50, Residency::Hbm);
  const NodeId l1 = lora(1, 10, Residency::Main);
  const NodeId l2 = lora(2, 10, Residency::Main);
  for (int i = 0; i < 6; ++i) cost_.stats().observe_query(1, {}, 0.0);
  cost_.stats().observe_query(2, {}, 0.0);
  const SwapPlan p = swapper_.tick(tree_, pool_, cost_, 0.0);
  EXPECT_EQ(p.direction, SwapDirection::In);
  ASSERT_EQ(p.moves.size(), 2u);
  EXPECT_EQ(p.moves[0].node, l1);
  EXPECT_EQ(p.moves[1].node, l2);
  EXPECT_DOUBLE_EQ(p.projected_usage, 0.7);
}

TEST_F(SwapperTest, AllPinnedRaisesWarning) {
  const NodeId a = lora(0, 99, Residency::Hbm);
  tree_.pin(a);
  const SwapPlan p = swapper_.tick(tree_, pool_, cost_, 0.0);
  EXPECT_EQ(p.direction, SwapDirection::Out);
  EXPECT_TRUE(p.moves.empty());
  EXPECT_TRUE(p.pinned_warning);
}

TEST_F(SwapperTest, EmptyInPlanReportsNone) {
  lora(0, 10, Residency::Hbm);
  const SwapPlan p = swapper_.tick(tree_, pool_, cost_, 0.0);
  EXPECT_EQ(p.direction, SwapDirection::None);
}

TEST_F(SwapperTest, InStopsBeforeCrossingUpper) {
  lora(0, 50, Residency::Hbm);
  lora(1, 46, Residency::Main);
  const SwapPlan p = swapper_.tick(tree_, pool_, cost_, 0.0);
  EXPECT_EQ(p.direction, SwapDirection::None);
}

TEST_F(SwapperTest, OutReexposesParents) {
  const NodeId l = lora(0, 7, Residency::Hbm);
  std::vector<NodeId> path;
  NodeId tail = l;
  for (ContentKey k : {1, 2, 3}) {
    tail = tree_.insert_kv(tail, k, 0.0);
    path.push_back(tail);
  }
  tree_.unpin(path);
  const auto moves =
      greedy_leaf_out(tree_, pool_, cost_, 0.0, {}, [](BlockCount used) { return used > 0; });
  ASSERT_EQ(moves.size(), 4u);
  EXPECT_EQ(moves[0].node, path[2]);
  EXPECT_EQ(moves[1].node, path[1]);
  EXPECT_EQ(moves[2].node, path[0]);
  EXPECT_EQ(moves[3].node, l);
  EXPECT_DOUBLE_EQ(moves.back().usage_after, 0.0);
}

TEST_F(SwapperTest, TiesBreakByNodeId) {
  const NodeId a = lora(0, 49, Residency::Hbm);
  lora(1, 49, Residency::Hbm);
  const SwapPlan p = swapper_.tick(tree_, pool_, cost_, 0.0);
  ASSERT_EQ(p.moves.size(), 1u);
  EXPECT_EQ(p.moves[0].node, a);
}

TEST_F(SwapperTest, PlanDuringTransferSwitch) {
  lora(0, 98, Residency::Hbm);
  const NodeId b = lora(1, 1, Residency::Main);
  tree_.begin_move(b, Residency::Hbm, true);
  Swapper blocked(SwapperConfig{0.1, 0.95, 0.70, false});
  EXPECT_EQ(blocked.tick(tree_, pool_, cost_, 0.0).direction, SwapDirection::None);
}

TEST(TransferChannel, OneBlockTakesBytesOverBandwidth) {
  TransferChannel ch(kBlockBytes, kBandwidth);
  EXPECT_DOUBLE_EQ(ch.enqueue(2.0, 1), 2.0 + kBlockBytes / kBandwidth);
}

TEST(TransferChannel, FifoQueuesBackToBack) {
  TransferChannel ch(kBlockBytes, kBandwidth);
  const Seconds first = ch.enqueue(0.0, 3);
  const Seconds second = ch.enqueue(0.0, 2);
  EXPECT_DOUBLE_EQ(first, 3 * kBlockBytes / kBandwidth);
  EXPECT_DOUBLE_EQ(second, 5 * kBlockBytes / kBandwidth);
  // An idle channel starts at `now`.
  EXPECT_DOUBLE_EQ(ch.enqueue(1.0, 1), 1.0 + kBlockBytes / kBandwidth);
}

TEST_F(SwapperTest, ApplyReservesAtEnqueueAndFlipsAtCompletion) {
  const NodeId a = lora(0, 49, Residency::Hbm);
  lora(1, 49, Residency::Hbm);
  const SwapPlan p = swapper_.tick(tree_, pool_, cost_, 0.0);
  const auto issued = swapper_.apply(p, tree_, channels_, 0.0, {});
  ASSERT_EQ(issued.size(), 1u);
  ASSERT_TRUE(issued[0].second);
  EXPECT_DOUBLE_EQ(issued[0].second->completes, 49 * kBlockBytes / kBandwidth);
  EXPECT_EQ(tree_.node(a).residency, Residency::Hbm);
  EXPECT_EQ(pool_.allocated(Tier::Main), 49);
  EXPECT_EQ(pool_.allocated(Tier::Hbm), 98);
  tree_.complete_move(a);
  EXPECT_EQ(tree_.node(a).residency, Residency::Main);
  EXPECT_EQ(pool_.allocated(Tier::Hbm), 49);
}

TEST_F(SwapperTest, StaleMoveIsSkippedAndLeavesLedgerUnchanged) {
  const NodeId a = lora(0, 49, Residency::Hbm);
  lora(1, 49, Residency::Hbm);
  const SwapPlan p = swapper_.tick(tree_, pool_, cost_, 0.0);
  ASSERT_EQ(p.moves.at(0).node, a);
  tree_.pin(a);  // a query grabbed it after planning
  const BlockCount hbm = pool_.allocated(Tier::Hbm);
  const BlockCount main = pool_.allocated(Tier::Main);
  const auto issued = swapper_.apply(p, tree_, channels_, 0.0, {});
  ASSERT_EQ(issued.size(), 1u);
  EXPECT_FALSE(issued[0].second);
  EXPECT_EQ(pool_.allocated(Tier::Hbm), hbm);
  EXPECT_EQ(pool_.allocated(Tier::Main), main);
  EXPECT_EQ(pool_.ledger_sum(Tier::Hbm), hbm);
  EXPECT_EQ(channels_.to_main.busy_until(), 0.0);
  EXPECT_FALSE(audit::check_counters(tree_));
}

TEST_F(SwapperTest, OutMakesRoomInMainByDiscardingLeaves) {
  BlockPool pool(PoolConfig{10, 3, 32, kBlockBytes, kBandwidth});
  DependencyTree tree(pool, kBlockBytes);
  const NodeId l = tree.ensure_lora(0, 2);
  tree.apply_move(l, Residency::Hbm);
  std::vector<NodeId> kv;
  NodeId tail = l;
  for (ContentKey k : {1, 2, 3, 4}) {
    tail = tree.insert_kv(tail, k, 0.0);
    kv.push_back(tail);
  }
  tree.unpin(kv);
  tree.apply_move(kv[3], Residency::Main);
  tree.apply_move(kv[2], Residency::Main);
  tree.apply_move(kv[1], Residency::Main);
  ASSERT_EQ(pool.free_blocks(Tier::Main), 0);
  Channels ch(pool.config());
  MainEvictionOrder order = [](const DependencyTree& t, Seconds) { return t.main_eviction_candidates(); };
  const auto t = issue_move(tree, ch, kv[0], Residency::Main, true, 0.0, order);
  ASSERT_TRUE(t);
  EXPECT_EQ(tree.node(kv[3]).residency, Residency::Absent);
  EXPECT_EQ(tree.node(kv[2]).residency, Residency::Main);
  // Without an order nothing can be discarded.
  EXPECT_FALSE(issue_move(tree, ch, l, Residency::Main, false, 0.0, {}));
}

TEST(SwapperConfig, Validation) {
  EXPECT_NO_THROW(SwapperConfig{}.validate());
  try {
    SwapperConfig{0.1, 0.6, 0.7, true}.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "swapper.lower_threshold");
    EXPECT_NE(std::string(e.what()).find("upper_threshold"), std::string::npos);
  }
  EXPECT_THROW(SwapperConfig({0.0, 0.95, 0.7, true}).validate(), ConfigError);
  EXPECT_THROW(SwapperConfig({0.1, 1.0, 0.7, true}).validate(), ConfigError);
}

// From random reachable states with no arrivals, repeated tick/apply with
// transfers completed in between settles on None without moving a node out
// and back in.
TEST(SwapperProperty, QuietPeriodSettlesWithoutPingPong) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::mt19937_64 rng(seed);
    BlockPool pool(PoolConfig{100, 1000, 32, kBlockBytes, kBandwidth});
    DependencyTree tree(pool, kBlockBytes);
    CostEvaluator cost(CostParams{}, kBlockBytes, kBandwidth);
    Channels ch(pool.config());
    const std::size_t n_lora = 2 + rng() % 6;
    for (LoraId l = 0; l < n_lora; ++l) tree.apply_move(tree.ensure_lora(l, 2 + static_cast<std::int64_t>(rng() % 20)), Residency::Main);
    cost.stats().set_lora_universe(n_lora);
    Seconds now = 0.0;
    // Random history: bring LoRAs in, grow chains, observe queries.
    for (int s = 0; s < 60; ++s) {
      now += 0.5;
      const LoraId l = static_cast<LoraId>(rng() % n_lora);
      const NodeId ln = *tree.find_lora(l);
      if (tree.node(ln).residency != Residency::Hbm) {
        if (pool.free_blocks(Tier::Hbm) < tree.node(ln).size_blocks) continue;
        tree.apply_move(ln, Residency::Hbm);
      }
      NodeId tail = ln;
      std::vector<NodeId> ins;
      std::vector<NodeId> seen;
      for (int d = 0; d < 1 + static_cast<int>(rng() % 5) && pool.free_blocks(Tier::Hbm) > 0; ++d) {
        const ContentKey key = rng() % 3;
        auto it = tree.node(tail).children.find(key);
        if (it != tree.node(tail).children.end()) {
          if (tree.node(it->second).residency != Residency::Hbm) break;
          tail = it->second;
          seen.push_back(tail);
          continue;
        }
        tail = tree.insert_kv(tail, key, now);
        ins.push_back(tail);
        cost.stats().observe_node(tail, now);
      }
      tree.unpin(ins);
      cost.stats().observe_query(l, seen, now);
      // Occasionally push a random leaf out.
      if (rng() % 3 == 0) {
        auto c = tree.swap_out_candidates();
        if (!c.empty()) tree.apply_move(c[rng() % c.size()], Residency::Main);
      }
    }
    Swapper sw(SwapperConfig{0.1, 0.95, 0.70, true});
    std::set<NodeId> went_out;
    int ticks = 0;
    for (; ticks < 50; ++ticks) {
      now += 0.1;
      const SwapPlan p = sw.tick(tree, pool, cost, now);
      if (p.direction == SwapDirection::None) break;
      for (const auto& [m, t] : sw.apply(p, tree, ch, now, {})) {
        if (!t) continue;
        if (m.to == Residency::Main) went_out.insert(m.node);
        if (m.to == Residency::Hbm) {
          ASSERT_FALSE(went_out.contains(m.node)) << "seed " << seed << " node " << m.node << " came straight back";
        }
        ASSERT_FALSE(audit::check_closure(tree)) << *audit::check_closure(tree);
      }
      for (const Node& n : tree.nodes()) {
        if (n.in_transit()) tree.complete_move(n.id);
      }
    }
    EXPECT_LT(ticks, 50) << "seed " << seed;
    EXPECT_FALSE(audit::check_counters(tree));
  }
}

}  // namespace
}  // namespace lorasim
