// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <unordered_map>

#include "lorasim/types.hpp"

namespace lorasim {

struct PoolConfig {
  BlockCount hbm_blocks = 0;
  BlockCount main_blocks = 0;
  std::int64_t block_tokens = 32;
  double block_bytes = 0.0;
  /// Bytes per second, one channel per direction.
  double pcie_bandwidth = 0.0;

  void validate() const {
    if (hbm_blocks <= 0) throw ConfigError("pool.hbm_blocks", "must be > 0");
    if (main_blocks < 0) throw ConfigError("pool.main_blocks", "must be >= 0");
    if (block_tokens <= 0) throw ConfigError("pool.block_tokens", "must be > 0");
    if (!(block_bytes > 0.0)) throw ConfigError("pool.block_bytes", "must be > 0");
    if (!(pcie_bandwidth > 0.0)) throw ConfigError("pool.pcie_bandwidth", "must be > 0");
  }

  Seconds transfer_seconds(BlockCount n) const { return static_cast<double>(n) * block_bytes / pcie_bandwidth; }
};

struct Allocation {
  Tier tier = Tier::Hbm;
  BlockCount n_blocks = 0;
  OwnerId owner = 0;
  std::uint64_t serial = 0;
};

/// Number of blocks a LoRA of `rank` occupies when partitioned block-wise
/// along the rank dimension.
inline BlockCount blocks_for_lora(std::int64_t rank, double lora_bytes_per_rank, double block_bytes) {
  if (rank <= 0) throw DomainError("rank must be > 0");
  const double bytes = static_cast<double>(rank) * lora_bytes_per_rank;
  return static_cast<BlockCount>(std::ceil(bytes / block_bytes));
}

/// Fixed-size block accounting over the HBM and main-memory tiers. Blocks are
/// opaque counters; each owner holds at most one allocation per tier.
class BlockPool {
 public:
  BlockPool() = default;

  explicit BlockPool(PoolConfig config) : config_(config) {
    config_.validate();
    capacity_ = {config_.hbm_blocks, config_.main_blocks};
    free_ = capacity_;
  }

  const PoolConfig& config() const noexcept { return config_; }

  Allocation allocate(Tier tier, BlockCount n, OwnerId owner) {
    if (n < 1) throw std::invalid_argument("allocation size must be >= 1");
    auto& live = live_[index(tier)];
    if (live.contains(owner)) throw std::logic_error("owner already holds an allocation in this tier");
    if (free_[index(tier)] < n) throw CapacityError(tier, n, free_[index(tier)]);
    free_[index(tier)] -= n;
    const Allocation alloc{tier, n, owner, ++serial_};
    live.emplace(owner, alloc);
    return alloc;
  }

  void free(const Allocation& alloc) {
    auto& live = live_[index(alloc.tier)];
    auto it = live.find(alloc.owner);
    if (it == live.end() || it->second.serial != alloc.serial) {
      throw DoubleFreeError("allocation for owner " + std::to_string(alloc.owner) + " is not live");
    }
    free_[index(alloc.tier)] += it->second.n_blocks;
    live.erase(it);
  }

  /// Frees whatever `owner` holds in `tier`; returns the number of blocks.
  BlockCount release(OwnerId owner, Tier tier) {
    auto alloc = find(owner, tier);
    if (!alloc) throw DoubleFreeError("owner " + std::to_string(owner) + " holds nothing in " + std::string(to_string(tier)));
    free(*alloc);
    return alloc->n_blocks;
  }

  std::optional<Allocation> find(OwnerId owner, Tier tier) const {
    const auto& live = live_[index(tier)];
    auto it = live.find(owner);
    if (it == live.end()) return std::nullopt;
    return it->second;
  }

  bool holds(OwnerId owner, Tier tier) const { return live_[index(tier)].contains(owner); }

  BlockCount capacity(Tier tier) const noexcept { return capacity_[index(tier)]; }
  BlockCount free_blocks(Tier tier) const noexcept { return free_[index(tier)]; }
  BlockCount allocated(Tier tier) const noexcept { return capacity_[index(tier)] - free_[index(tier)]; }
  std::size_t live_allocations(Tier tier) const noexcept { return live_[index(tier)].size(); }

  double usage(Tier tier) const noexcept {
    const BlockCount cap = capacity(tier);
    if (cap == 0) return 0.0;
    return static_cast<double>(allocated(tier)) / static_cast<double>(cap);
  }

  BlockCount blocks_for_lora(std::int64_t rank, double lora_bytes_per_rank) const {
    return lorasim::blocks_for_lora(rank, lora_bytes_per_rank, config_.block_bytes);
  }

  /// Sum of live allocation sizes in `tier`; equals allocated(tier) when the
  /// ledger is consistent.
  BlockCount ledger_sum(Tier tier) const {
    BlockCount sum = 0;
    for (const auto& [owner, alloc] : live_[index(tier)]) sum += alloc.n_blocks;
    return sum;
  }

 private:
  static constexpr std::size_t index(Tier t) noexcept { return t == Tier::Hbm ? 0 : 1; }

  PoolConfig config_{};
  std::array<BlockCount, 2> capacity_{0, 0};
  std::array<BlockCount, 2> free_{0, 0};
  std::array<std::unordered_map<OwnerId, Allocation>, 2> live_{};
  std::uint64_t serial_ = 0;
};

}  // namespace lorasim
