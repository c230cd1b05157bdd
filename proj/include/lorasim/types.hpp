// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace lorasim {

using NodeId = std::uint32_t;
using OwnerId = std::uint64_t;
using ContentKey = std::uint64_t;
using LoraId = std::uint32_t;
using BlockCount = std::int64_t;
using Seconds = double;

inline constexpr NodeId kRootNode = 0;
inline constexpr NodeId kInvalidNode = std::numeric_limits<NodeId>::max();

// Owners in [kScratchOwnerBase, ...) are per-query scratch reservations, the
// rest are tree nodes.
inline constexpr OwnerId kScratchOwnerBase = OwnerId{1} << 62;

inline constexpr OwnerId scratch_owner(std::uint64_t query_id) { return kScratchOwnerBase | query_id; }
inline constexpr bool is_scratch_owner(OwnerId owner) { return owner >= kScratchOwnerBase; }

enum class Tier : std::uint8_t { Hbm, Main };

enum class Residency : std::uint8_t { Hbm, Main, Absent };

inline constexpr Residency to_residency(Tier t) { return t == Tier::Hbm ? Residency::Hbm : Residency::Main; }

inline constexpr std::string_view to_string(Tier t) { return t == Tier::Hbm ? "Hbm" : "Main"; }

inline constexpr std::string_view to_string(Residency r) {
  switch (r) {
    case Residency::Hbm:
      return "Hbm";
    case Residency::Main:
      return "Main";
    case Residency::Absent:
      return "Absent";
  }
  return "?";
}

class CapacityError : public std::runtime_error {
 public:
  CapacityError(Tier tier, BlockCount requested, BlockCount available)
      : std::runtime_error("insufficient " + std::string(to_string(tier)) + " blocks: requested " +
                           std::to_string(requested) + ", free " + std::to_string(available)),
        tier_(tier),
        requested_(requested),
        available_(available) {}

  Tier tier() const noexcept { return tier_; }
  BlockCount requested() const noexcept { return requested_; }
  BlockCount available() const noexcept { return available_; }

 private:
  Tier tier_;
  BlockCount requested_;
  BlockCount available_;
};

class DoubleFreeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ClosureViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class UnderflowError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised for invalid scenario configuration. `field()` names the offending
/// key using dotted notation (e.g. "swapper.lower_threshold").
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& message)
      : std::runtime_error("line " + std::to_string(line) + ": " + message), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class OrderError : public std::runtime_error {
 public:
  OrderError(std::size_t line, const std::string& message)
      : std::runtime_error("line " + std::to_string(line) + ": " + message), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lorasim
