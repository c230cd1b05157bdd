// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "lorasim/format.hpp"
#include "lorasim/query.hpp"
#include "lorasim/rng.hpp"
#include "lorasim/types.hpp"

namespace lorasim {

enum class DistributionKind : std::uint8_t { Uniform, Distinct, Gaussian, Shifting };

inline constexpr std::string_view to_string(DistributionKind k) {
  switch (k) {
    case DistributionKind::Uniform:
      return "uniform";
    case DistributionKind::Distinct:
      return "distinct";
    case DistributionKind::Gaussian:
      return "gaussian";
    case DistributionKind::Shifting:
      return "shifting";
  }
  return "?";
}

/// LoRA popularity. Gaussian and Shifting place LoRA i at (i + 0.5) / n on a
/// unit circle; Shifting moves the mean by `drift` per second.
struct Distribution {
  DistributionKind kind = DistributionKind::Uniform;
  double sigma = 0.1;
  double drift = 0.0;
  double center = 0.5;

  double center_at(Seconds t) const {
    const double c = kind == DistributionKind::Shifting ? center + drift * t : center;
    return c - std::floor(c);
  }
};

struct IntRange {
  std::int64_t min = 1;
  std::int64_t max = 1;

  void validate(const std::string& field, std::int64_t lowest) const {
    if (min < lowest) throw ConfigError(field, "min must be >= " + std::to_string(lowest));
    if (max < min) throw ConfigError(field, "max must be >= min");
  }

  template <typename Rng>
  std::int64_t draw(Rng& rng) const {
    return std::uniform_int_distribution<std::int64_t>(min, max)(rng);
  }
};

struct ScenarioSpec {
  std::size_t n_lora = 1;
  Distribution distribution;
  double rate = 1.0;
  Seconds duration = 60.0;
  /// 0 means no cap beyond duration.
  std::size_t max_queries = 0;
  /// Sessions open at once per LoRA; each arrival continues one of them.
  std::size_t sessions_per_lora = 4;
  IntRange turns{1, 1};
  IntRange new_tokens{64, 512};
  IntRange output_tokens{32, 256};

  void validate() const {
    if (n_lora < 1) throw ConfigError("workload.n_lora", "must be >= 1");
    if (!(rate > 0)) throw ConfigError("workload.rate", "must be > 0");
    if (!(duration > 0)) throw ConfigError("workload.duration", "must be > 0");
    if (sessions_per_lora < 1) throw ConfigError("workload.sessions_per_lora", "must be >= 1");
    const auto k = distribution.kind;
    if ((k == DistributionKind::Gaussian || k == DistributionKind::Shifting) && !(distribution.sigma > 0)) {
      throw ConfigError("workload.distribution.sigma", "must be > 0");
    }
    turns.validate("workload.turns", 1);
    new_tokens.validate("workload.new_tokens", 1);
    output_tokens.validate("workload.output_tokens", 1);
  }
};

struct TraceRecord {
  Seconds arrival_s = 0.0;
  std::uint64_t session_id = 0;
  LoraId lora_id = 0;
  std::int64_t new_prompt_tokens = 1;
  std::int64_t output_tokens = 1;

  bool operator==(const TraceRecord&) const = default;
};

/// LoRA index nearest to position x on the unit circle.
inline LoraId snap_to_lora(double x, std::size_t n) {
  x -= std::floor(x);
  const auto idx = static_cast<std::size_t>(x * static_cast<double>(n));
  return static_cast<LoraId>(std::min(idx, n - 1));
}

/// Poisson arrivals, per-distribution LoRA choice and multi-turn sessions.
inline std::vector<TraceRecord> generate(const ScenarioSpec& spec, std::uint64_t seed) {
  spec.validate();
  auto arrivals = named_stream(seed, "workload.arrivals");
  auto lora_rng = named_stream(seed, "workload.lora");
  auto session_rng = named_stream(seed, "workload.sessions");
  auto token_rng = named_stream(seed, "workload.tokens");
  std::exponential_distribution<double> gap(spec.rate);
  std::uniform_int_distribution<std::size_t> uniform_lora(0, spec.n_lora - 1);
  std::uniform_int_distribution<std::size_t> slot_pick(0, spec.sessions_per_lora - 1);

  struct Slot {
    std::uint64_t session = 0;
    std::int64_t turns_left = 0;
  };
  std::vector<Slot> slots(spec.n_lora * spec.sessions_per_lora);
  std::uint64_t next_session = 0;

  std::vector<TraceRecord> out;
  Seconds t = 0.0;
  for (std::size_t i = 0;; ++i) {
    t += gap(arrivals);
    if (t > spec.duration) break;
    if (spec.max_queries != 0 && out.size() >= spec.max_queries) break;
    LoraId lora = 0;
    switch (spec.distribution.kind) {
      case DistributionKind::Uniform:
        lora = static_cast<LoraId>(uniform_lora(lora_rng));
        break;
      case DistributionKind::Distinct:
        lora = static_cast<LoraId>(i % spec.n_lora);
        break;
      case DistributionKind::Gaussian:
      case DistributionKind::Shifting: {
        std::normal_distribution<double> pos(spec.distribution.center_at(t), spec.distribution.sigma);
        lora = snap_to_lora(pos(lora_rng), spec.n_lora);
        break;
      }
    }
    Slot& s = slots[lora * spec.sessions_per_lora + slot_pick(session_rng)];
    if (s.turns_left == 0) {
      s.session = next_session++;
      s.turns_left = spec.turns.draw(session_rng);
    }
    --s.turns_left;
    TraceRecord r;
    r.arrival_s = t;
    r.session_id = s.session;
    r.lora_id = lora;
    r.new_prompt_tokens = spec.new_tokens.draw(token_rng);
    r.output_tokens = spec.output_tokens.draw(token_rng);
    out.push_back(r);
  }
  return out;
}

// --- trace files (one JSON object per line) --------------------------------

inline void write_trace(std::ostream& os, const std::vector<TraceRecord>& records) {
  for (const TraceRecord& r : records) {
    os << "{\"arrival_s\":" << format_double(r.arrival_s) << ",\"session_id\":" << r.session_id
       << ",\"lora_id\":" << r.lora_id << ",\"new_prompt_tokens\":" << r.new_prompt_tokens
       << ",\"output_tokens\":" << r.output_tokens << "}\n";
  }
}

inline std::string trace_text(const std::vector<TraceRecord>& records) {
  std::ostringstream os;
  write_trace(os, records);
  return os.str();
}

/// Fingerprint of a trace realization.
inline std::uint64_t workload_hash(const std::vector<TraceRecord>& records) { return fnv1a64(trace_text(records)); }

inline std::vector<TraceRecord> read_trace(std::istream& is) {
  std::vector<TraceRecord> out;
  std::unordered_map<std::uint64_t, LoraId> session_lora;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(lineno, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(lineno, "record must be a JSON object");
    TraceRecord r;
    try {
      r.arrival_s = j.at("arrival_s").get<double>();
      r.session_id = j.at("session_id").get<std::uint64_t>();
      r.lora_id = j.at("lora_id").get<LoraId>();
      r.new_prompt_tokens = j.at("new_prompt_tokens").get<std::int64_t>();
      r.output_tokens = j.at("output_tokens").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, std::string("bad or missing field: ") + e.what());
    }
    if (!(r.arrival_s >= 0) || !std::isfinite(r.arrival_s)) throw ParseError(lineno, "arrival_s must be >= 0");
    if (r.new_prompt_tokens < 1) throw ParseError(lineno, "new_prompt_tokens must be >= 1");
    if (r.output_tokens < 1) throw ParseError(lineno, "output_tokens must be >= 1");
    if (!out.empty() && r.arrival_s < out.back().arrival_s) {
      throw OrderError(lineno, "arrival_s decreases from " + format_double(out.back().arrival_s));
    }
    auto [it, fresh] = session_lora.emplace(r.session_id, r.lora_id);
    if (!fresh && it->second != r.lora_id) throw ParseError(lineno, "session changes LoRA");
    out.push_back(r);
  }
  return out;
}

inline std::vector<TraceRecord> load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace " + path);
  return read_trace(in);
}

/// Content key of block `index` in a session's token stream.
inline ContentKey block_key(std::uint64_t session_id, std::uint64_t index) {
  return splitmix64(splitmix64(session_id) ^ (index * 0x9e3779b97f4a7c15ULL + 1));
}

/// Turns trace records into queries. Each turn's prompt is the whole session
/// so far (previous prompts and outputs) plus its new tokens.
inline std::vector<Query> build_queries(const std::vector<TraceRecord>& records, std::int64_t block_tokens,
                                        double time_scale = 1.0) {
  std::vector<Query> out;
  out.reserve(records.size());
  std::unordered_map<std::uint64_t, std::int64_t> history;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const TraceRecord& r = records[i];
    std::int64_t& h = history[r.session_id];
    Query q;
    q.id = i;
    q.session_id = r.session_id;
    q.lora_id = r.lora_id;
    q.arrival = r.arrival_s * time_scale;
    q.prompt_tokens = h + r.new_prompt_tokens;
    q.output_tokens = r.output_tokens;
    const std::int64_t full = q.total_tokens() / block_tokens;
    q.block_keys.reserve(static_cast<std::size_t>(full));
    for (std::int64_t k = 0; k < full; ++k) q.block_keys.push_back(block_key(r.session_id, static_cast<std::uint64_t>(k)));
    h = q.total_tokens();
    out.push_back(std::move(q));
  }
  return out;
}

// --- function-invocation traces ---------------------------------------------

struct FunctionCall {
  Seconds arrival_s = 0.0;
  std::string function_id;
};

/// CSV with header `arrival_s,function_id`.
inline std::vector<FunctionCall> read_function_trace(std::istream& is) {
  std::vector<FunctionCall> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("arrival_s", 0) == 0) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError(lineno, "expected arrival_s,function_id");
    FunctionCall c;
    try {
      std::size_t used = 0;
      c.arrival_s = std::stod(line.substr(0, comma), &used);
      if (used != comma) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ParseError(lineno, "bad arrival_s");
    }
    c.function_id = line.substr(comma + 1);
    if (c.function_id.empty()) throw ParseError(lineno, "empty function_id");
    if (!out.empty() && c.arrival_s < out.back().arrival_s) throw OrderError(lineno, "arrival_s decreases");
    out.push_back(std::move(c));
  }
  return out;
}

/// Ranks functions by call count (ties by name) and maps the top `n_lora` to
/// LoRA ids 0..n_lora-1; other calls are dropped. Each call becomes a
/// single-turn session with token counts drawn from the given ranges.
inline std::vector<TraceRecord> map_function_trace(const std::vector<FunctionCall>& calls, std::size_t n_lora,
                                                   const IntRange& new_tokens, const IntRange& output_tokens,
                                                   std::uint64_t seed) {
  std::map<std::string, std::uint64_t> counts;
  for (const FunctionCall& c : calls) ++counts[c.function_id];
  std::vector<std::pair<std::string, std::uint64_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::unordered_map<std::string, LoraId> lora_of;
  for (std::size_t i = 0; i < std::min(n_lora, ranked.size()); ++i) lora_of.emplace(ranked[i].first, static_cast<LoraId>(i));

  auto rng = named_stream(seed, "workload.tokens");
  std::vector<TraceRecord> out;
  std::uint64_t session = 0;
  for (const FunctionCall& c : calls) {
    auto it = lora_of.find(c.function_id);
    if (it == lora_of.end()) continue;
    TraceRecord r;
    r.arrival_s = c.arrival_s;
    r.session_id = session++;
    r.lora_id = it->second;
    r.new_prompt_tokens = new_tokens.draw(rng);
    r.output_tokens = output_tokens.draw(rng);
    out.push_back(r);
  }
  return out;
}

}  // namespace lorasim
