// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>
#include <string>

#include "lorasim/format.hpp"
#include "lorasim/simulator.hpp"

namespace lorasim {

inline constexpr std::string_view kSchemaLine = "# schema=1";

inline void write_queries_csv(std::ostream& os, const MetricsReport& r) {
  os << kSchemaLine << '\n'
     << "query_id,session_id,lora_id,arrival,admit_time,lora_ready,kv_ready,first_token_time,completion_time,"
        "ttft,tpot,queue_time,lora_cold_start,kv_cold_start,compute_time,prompt_tokens,output_tokens,"
        "prompt_blocks,hbm_hit_blocks,main_hit_blocks,miss_blocks,lora_hit\n";
  for (const QueryTimeline& q : r.queries) {
    os << q.query_id << ',' << q.session_id << ',' << q.lora_id << ',' << format_double(q.arrival) << ','
       << format_double(q.admit_time) << ',' << format_double(q.lora_ready) << ',' << format_double(q.kv_ready)
       << ',' << format_double(q.first_token_time) << ',' << format_double(q.completion_time) << ','
       << format_double(q.ttft()) << ',' << format_double(q.tpot()) << ',' << format_double(q.queue_time) << ','
       << format_double(q.lora_cold_start) << ',' << format_double(q.kv_cold_start) << ','
       << format_double(q.compute_time) << ',' << q.prompt_tokens << ',' << q.output_tokens << ','
       << q.prompt_blocks << ',' << q.hbm_hit_blocks << ',' << q.main_hit_blocks << ',' << q.miss_blocks << ','
       << (q.lora_hit ? 1 : 0) << '\n';
  }
}

inline void write_utilization_csv(std::ostream& os, const MetricsReport& r) {
  os << kSchemaLine << '\n' << "time,lora_blocks,history_kv_blocks,running_kv_blocks,invalid_kv_fraction\n";
  for (const UtilizationSample& u : r.utilization) {
    os << format_double(u.time) << ',' << u.lora_blocks << ',' << u.history_kv_blocks << ',' << u.running_kv_blocks
       << ',' << format_double(u.invalid_kv_fraction) << '\n';
  }
}

inline void write_swaps_csv(std::ostream& os, const MetricsReport& r) {
  os << kSchemaLine << '\n' << "tick_time,direction,node_id,kind,eval,usage_before,usage_after\n";
  for (const SwapRecord& s : r.swaps) {
    os << format_double(s.time) << ',' << to_string(s.direction) << ',' << s.node << ','
       << (s.is_lora ? "lora" : "kv") << ',' << format_double(s.eval) << ',' << format_double(s.usage_before) << ','
       << format_double(s.usage_after) << '\n';
  }
}

/// key=value lines; the first line identifies the run.
inline void write_summary(std::ostream& os, const MetricsReport& r, std::uint64_t workload_hash) {
  const Summary& s = r.summary;
  os << "seed=" << r.seed << " policy=" << r.policy << " workload_hash=" << format_hex(workload_hash) << '\n'
     << "n_queries=" << s.n_queries << '\n'
     << "mean_ttft=" << format_double(s.mean_ttft) << '\n'
     << "p50_ttft=" << format_double(s.p50_ttft) << '\n'
     << "p99_ttft=" << format_double(s.p99_ttft) << '\n'
     << "mean_tpot=" << format_double(s.mean_tpot) << '\n'
     << "kv_hit_rate=" << format_double(s.kv_hit_rate) << '\n'
     << "lora_hit_rate=" << format_double(s.lora_hit_rate) << '\n'
     << "invalid_kv_mean=" << format_double(s.invalid_kv_mean) << '\n'
     << "swaps=" << r.swaps.size() << '\n'
     << "pinned_warnings=" << r.pinned_warnings << '\n';
}

}  // namespace lorasim
