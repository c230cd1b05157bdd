// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string_view>
#include <vector>

#include "lorasim/policy.hpp"

namespace lorasim {

struct StaticPartitionConfig {
  double lora_ratio = 0.2;

  void validate() const {
    if (!(lora_ratio > 0.0 && lora_ratio < 1.0)) throw ConfigError("policy.lora_ratio", "must lie in (0,1)");
  }
};

/// Splits `pool` into a LoRA sub-pool and a KV sub-pool. Main memory is
/// divided in the same proportion.
inline std::pair<PoolConfig, PoolConfig> split_pool(const PoolConfig& pool, double lora_ratio) {
  PoolConfig lora = pool;
  PoolConfig kv = pool;
  lora.hbm_blocks = static_cast<BlockCount>(std::floor(static_cast<double>(pool.hbm_blocks) * lora_ratio));
  kv.hbm_blocks = pool.hbm_blocks - lora.hbm_blocks;
  lora.main_blocks = static_cast<BlockCount>(std::floor(static_cast<double>(pool.main_blocks) * lora_ratio));
  kv.main_blocks = pool.main_blocks - lora.main_blocks;
  if (lora.hbm_blocks <= 0 || kv.hbm_blocks <= 0) {
    throw ConfigError("policy.lora_ratio", "leaves an empty HBM sub-pool");
  }
  return {lora, kv};
}

/// Fixed LoRA/KV partition of HBM, LRU within each part, history KV offloaded
/// to main memory and restored on hit. Dependencies are ignored.
class StaticPartitionLru final : public CachePolicy {
 public:
  StaticPartitionLru(const PoolConfig& pool, double lora_bytes_per_rank, CostParams cost,
                     StaticPartitionConfig partition = {})
      : StaticPartitionLru(split_pool(pool, checked(partition).lora_ratio), lora_bytes_per_rank, cost) {}

  std::string_view name() const override { return "static_lru"; }
  bool enforce_closure() const override { return false; }

  MainEvictionOrder main_eviction_order() override {
    return [this](const DependencyTree&, Seconds) { return lru_main_order(); };
  }

 protected:
  std::vector<PlannedMove> select_victims(BlockPool& pool, BlockCount shortfall, std::span<const NodeId> protect,
                                          Seconds /*now*/) override {
    return lru_victims(pool, shortfall, protect, false);
  }

 private:
  StaticPartitionLru(std::pair<PoolConfig, PoolConfig> pools, double bpr, CostParams cost)
      : CachePolicy(pools.first, pools.second, bpr, cost) {}

  static const StaticPartitionConfig& checked(const StaticPartitionConfig& c) {
    c.validate();
    return c;
  }
};

/// Unified pool without history: every query recomputes its KV and frees it
/// on completion. LoRAs stay until their blocks are needed (LRU among idle
/// adapters).
class NoHistoryKv final : public CachePolicy {
 public:
  NoHistoryKv(const PoolConfig& pool, double lora_bytes_per_rank, CostParams cost)
      : CachePolicy(pool, lora_bytes_per_rank, cost) {}

  std::string_view name() const override { return "no_history"; }
  bool enforce_closure() const override { return false; }
  MainEvictionOrder main_eviction_order() override { return {}; }

 protected:
  bool reuse_history() const override { return false; }

  std::vector<PlannedMove> select_victims(BlockPool& pool, BlockCount shortfall, std::span<const NodeId> protect,
                                          Seconds /*now*/) override {
    return lru_victims(pool, shortfall, protect, true);
  }
};

}  // namespace lorasim
