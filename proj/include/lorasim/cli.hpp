// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <future>
#include <ostream>
#include <string>
#include <vector>

#include "lorasim/config.hpp"
#include "lorasim/format.hpp"
#include "lorasim/metrics.hpp"
#include "lorasim/scenario.hpp"

namespace lorasim {

enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitConfig = 2 };

namespace detail {

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

template <typename Fn>
std::string render(Fn&& fn) {
  std::ostringstream os;
  fn(os);
  return os.str();
}

template <typename Body>
int guarded(std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace detail

/// Writes queries.csv, utilization.csv, swaps.csv and summary.txt into `dir`.
inline void write_artifacts(const std::filesystem::path& dir, const MetricsReport& r, std::uint64_t workload_hash) {
  std::filesystem::create_directories(dir);
  detail::write_file(dir / "queries.csv", detail::render([&](std::ostream& os) { write_queries_csv(os, r); }));
  detail::write_file(dir / "utilization.csv", detail::render([&](std::ostream& os) { write_utilization_csv(os, r); }));
  detail::write_file(dir / "swaps.csv", detail::render([&](std::ostream& os) { write_swaps_csv(os, r); }));
  detail::write_file(dir / "summary.txt",
                     detail::render([&](std::ostream& os) { write_summary(os, r, workload_hash); }));
}

inline int cmd_run(const std::string& config_path, const std::vector<std::string>& overrides, std::ostream& out,
                   std::ostream& err) {
  return detail::guarded(err, [&] {
    const ScenarioConfig cfg = load_config(config_path, overrides);
    const Workload w = materialize(cfg);
    const MetricsReport r = run_scenario(cfg, w, cfg.policy);
    write_artifacts(cfg.output_dir, r, w.hash);
    write_summary(out, r, w.hash);
    return kExitOk;
  });
}

inline int cmd_compare(const std::string& config_path, std::vector<std::string> policies,
                       const std::vector<std::string>& overrides, std::ostream& out, std::ostream& err,
                       bool parallel = true) {
  return detail::guarded(err, [&] {
    const ScenarioConfig cfg = load_config(config_path, overrides);
    if (policies.empty()) policies = {"fastlibra", "static_lru", "no_history"};
    for (const std::string& p : policies) make_policy(cfg, p);
    const Workload w = materialize(cfg);
    std::vector<std::future<MetricsReport>> futures;
    for (const std::string& p : policies) {
      futures.push_back(std::async(parallel ? std::launch::async : std::launch::deferred,
                                   [&cfg, &w, p] { return run_scenario(cfg, w, p); }));
    }
    std::vector<MetricsReport> reports;
    for (auto& f : futures) reports.push_back(f.get());

    std::ostringstream table;
    table << kSchemaLine << '\n'
          << "policy,mean_ttft,p50_ttft,p99_ttft,mean_tpot,kv_hit_rate,lora_hit_rate,invalid_kv_mean\n";
    for (const MetricsReport& r : reports) {
      const Summary& s = r.summary;
      table << r.policy << ',' << format_double(s.mean_ttft) << ',' << format_double(s.p50_ttft) << ','
            << format_double(s.p99_ttft) << ',' << format_double(s.mean_tpot) << ',' << format_double(s.kv_hit_rate)
            << ',' << format_double(s.lora_hit_rate) << ',' << format_double(s.invalid_kv_mean) << '\n';
      write_artifacts(std::filesystem::path(cfg.output_dir) / r.policy, r, w.hash);
    }
    detail::write_file(std::filesystem::path(cfg.output_dir) / "compare.csv", table.str());
    out << "seed=" << cfg.seed << " workload_hash=" << format_hex(w.hash) << " queries=" << w.queries.size() << '\n';
    out << table.str();
    return kExitOk;
  });
}

inline int cmd_sweep(const std::string& config_path, const std::vector<double>& rates, const std::string& policy,
                     const std::vector<std::string>& overrides, std::ostream& out, std::ostream& err,
                     bool parallel = true) {
  return detail::guarded(err, [&] {
    if (rates.empty()) throw ConfigError("rates", "at least one rate is required");
    const ScenarioConfig cfg = load_config(config_path, overrides);
    const std::string name = policy.empty() ? cfg.policy : policy;
    make_policy(cfg, name);
    const SweepResult r = sweep_peak_throughput(cfg, name, rates, parallel);
    std::ostringstream csv;
    csv << kSchemaLine << '\n' << "rate,mean_ttft\n";
    for (const SweepPoint& p : r.points) csv << format_double(p.rate) << ',' << format_double(p.mean_ttft) << '\n';
    std::filesystem::create_directories(cfg.output_dir);
    detail::write_file(std::filesystem::path(cfg.output_dir) / "sweep.csv", csv.str());
    out << csv.str();
    out << "policy=" << name << " peak_rate=" << (r.peak ? format_double(*r.peak) : std::string("unsupported"))
        << '\n';
    return kExitOk;
  });
}

inline int cmd_gen(const std::string& spec_path, const std::string& out_path, const std::vector<std::string>& overrides,
                   std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    const ScenarioConfig cfg = load_config(spec_path, overrides);
    if (!cfg.workload) throw ConfigError("workload", "gen needs a 'workload' section");
    const std::vector<TraceRecord> records = generate(*cfg.workload, cfg.seed);
    const std::filesystem::path p(out_path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    detail::write_file(p, trace_text(records));
    out << "wrote " << records.size() << " records to " << out_path << " workload_hash=" << format_hex(workload_hash(records))
        << '\n';
    return kExitOk;
  });
}

}  // namespace lorasim
