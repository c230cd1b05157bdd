// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "lorasim/types.hpp"

namespace lorasim {

/// One inference request. `block_keys` carries the content key of every full
/// block of the final sequence (prompt followed by output); the first
/// prompt_full_blocks() of them are the prompt's.
struct Query {
  std::uint64_t id = 0;
  std::uint64_t session_id = 0;
  LoraId lora_id = 0;
  Seconds arrival = 0.0;
  std::int64_t prompt_tokens = 0;
  std::int64_t output_tokens = 1;
  std::vector<ContentKey> block_keys;

  std::int64_t total_tokens() const noexcept { return prompt_tokens + output_tokens; }

  std::size_t prompt_full_blocks(std::int64_t block_tokens) const noexcept {
    return std::min(block_keys.size(), static_cast<std::size_t>(prompt_tokens / block_tokens));
  }

  /// Blocks touched by prompt plus output, partial tail included.
  BlockCount total_blocks(std::int64_t block_tokens) const noexcept {
    return (total_tokens() + block_tokens - 1) / block_tokens;
  }

  /// Prompt blocks, partial tail included.
  BlockCount prompt_blocks(std::int64_t block_tokens) const noexcept {
    return (prompt_tokens + block_tokens - 1) / block_tokens;
  }
};

}  // namespace lorasim
