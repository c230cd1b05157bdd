// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "lorasim/cli.hpp"

namespace lorasim {
namespace {

namespace fs = std::filesystem;

const std::string kScenarios = LORASIM_SCENARIO_DIR;

fs::path fresh_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  const fs::path p = fs::temp_directory_path() /
                     ("lorasim_cli_" + std::to_string(::getpid()) + "_" + tag + "_" + std::to_string(counter++));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> small(const fs::path& out, std::size_t max_queries = 120) {
  return {"output_dir=" + out.string(), "workload.max_queries=" + std::to_string(max_queries)};
}

std::map<std::string, std::string> parse_summary(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream words(line);
    std::string w;
    while (words >> w) {
      const auto eq = w.find('=');
      if (eq != std::string::npos) kv[w.substr(0, eq)] = w.substr(eq + 1);
    }
  }
  return kv;
}

// Rows of a CSV after the schema and header lines, split on commas.
std::vector<std::vector<std::string>> csv_rows(const std::string& text, std::vector<std::string>* header = nullptr) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    std::vector<std::string> cells;
    std::istringstream cs(line);
    std::string c;
    while (std::getline(cs, c, ',')) cells.push_back(c);
    if (n == 1) continue;
    if (n == 2) {
      if (header) *header = cells;
      continue;
    }
    rows.push_back(cells);
  }
  return rows;
}

int run_binary(const std::string& args) {
  const std::string cmd = std::string(LORASIM_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << text;
  return p;
}

TEST(CmdRun, WritesFourArtifacts) {
  const fs::path out = fresh_dir("run");
  std::ostringstream o;
  std::ostringstream e;
  ASSERT_EQ(cmd_run(kScenarios + "/uniform.json", small(out), o, e), kExitOk) << e.str();
  for (const char* f : {"queries.csv", "utilization.csv", "swaps.csv", "summary.txt"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  EXPECT_EQ(csv_rows(slurp(out / "queries.csv")).size(), 120u);
  EXPECT_EQ(slurp(out / "summary.txt"), o.str());
  EXPECT_EQ(slurp(out / "queries.csv").rfind("# schema=1\n", 0), 0u);
}

TEST(CmdRun, EveryBundledScenarioRuns) {
  for (const auto& entry : fs::directory_iterator(kScenarios)) {
    if (entry.path().extension() != ".json") continue;
    const fs::path out = fresh_dir("all");
    std::vector<std::string> sets{"output_dir=" + out.string()};
    if (entry.path().filename() != "trace_replay.json") sets.push_back("workload.max_queries=80");
    std::ostringstream o;
    std::ostringstream e;
    EXPECT_EQ(cmd_run(entry.path().string(), sets, o, e), kExitOk) << entry.path() << ": " << e.str();
  }
}

TEST(CmdRun, InvertedThresholdsAreAConfigError) {
  const fs::path out = fresh_dir("thr");
  std::vector<std::string> sets = small(out);
  sets.push_back("swapper.lower_threshold=0.9");
  sets.push_back("swapper.upper_threshold=0.5");
  std::ostringstream o;
  std::ostringstream e;
  EXPECT_EQ(cmd_run(kScenarios + "/uniform.json", sets, o, e), kExitConfig);
  EXPECT_NE(e.str().find("threshold"), std::string::npos) << e.str();
  EXPECT_FALSE(fs::exists(out / "queries.csv"));
}

TEST(CmdRun, ConfigErrorsExitTwo) {
  const fs::path out = fresh_dir("bad");
  std::ostringstream o;
  std::ostringstream e;
  EXPECT_EQ(cmd_run(kScenarios + "/uniform.json", {"output_dir=" + out.string(), "workload.bogus=1"}, o, e),
            kExitConfig);
  EXPECT_NE(e.str().find("workload.bogus"), std::string::npos);
  EXPECT_EQ(cmd_run(kScenarios + "/uniform.json", {"policy.name=lru"}, o, e), kExitConfig);
  EXPECT_EQ(cmd_run(kScenarios + "/uniform.json", {"pool.hbm_blocks=0"}, o, e), kExitConfig);
  EXPECT_EQ(cmd_run(kScenarios + "/uniform.json", {"noequals"}, o, e), kExitConfig);
  EXPECT_EQ(cmd_run((out / "missing.json").string(), {}, o, e), kExitConfig);
  const fs::path both = write_config(out, R"({"workload":{"n_lora":2},"trace":{"path":"x.jsonl"}})");
  EXPECT_EQ(cmd_run(both.string(), {}, o, e), kExitConfig);
}

TEST(CmdRun, SeedOverrideShowsInSummary) {
  const fs::path out = fresh_dir("seed");
  std::vector<std::string> sets = small(out);
  sets.push_back("seed=7");
  std::ostringstream o;
  std::ostringstream e;
  ASSERT_EQ(cmd_run(kScenarios + "/skewed.json", sets, o, e), kExitOk) << e.str();
  EXPECT_EQ(o.str().rfind("seed=7 policy=fastlibra workload_hash=0x", 0), 0u) << o.str();
}

TEST(CmdRun, SummaryMatchesRecomputationFromCsv) {
  const fs::path out = fresh_dir("sum");
  std::ostringstream o;
  std::ostringstream e;
  ASSERT_EQ(cmd_run(kScenarios + "/shifting_gaussian.json", small(out, 300), o, e), kExitOk) << e.str();
  std::vector<std::string> h;
  const auto rows = csv_rows(slurp(out / "queries.csv"), &h);
  auto col = [&](const std::string& name) {
    return static_cast<std::size_t>(std::find(h.begin(), h.end(), name) - h.begin());
  };
  double ttft_sum = 0.0;
  double tpot_sum = 0.0;
  std::size_t tpot_n = 0;
  long hits = 0;
  long blocks = 0;
  long lora_hits = 0;
  std::vector<double> ttfts;
  for (const auto& r : rows) {
    const double ttft = std::stod(r[col("ttft")]);
    ttfts.push_back(ttft);
    ttft_sum += ttft;
    if (std::stol(r[col("output_tokens")]) > 1) {
      tpot_sum += std::stod(r[col("tpot")]);
      ++tpot_n;
    }
    hits += std::stol(r[col("hbm_hit_blocks")]) + std::stol(r[col("main_hit_blocks")]);
    blocks += std::stol(r[col("prompt_blocks")]);
    lora_hits += std::stol(r[col("lora_hit")]);
  }
  std::sort(ttfts.begin(), ttfts.end());
  const auto nearest = [&](double p) {
    const auto k = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(ttfts.size())));
    return ttfts[std::max<std::size_t>(k, 1) - 1];
  };
  double invalid = 0.0;
  const auto util = csv_rows(slurp(out / "utilization.csv"));
  for (const auto& u : util) invalid += std::stod(u[4]);

  const auto s = parse_summary(slurp(out / "summary.txt"));
  const double n = static_cast<double>(rows.size());
  EXPECT_EQ(std::stoul(s.at("n_queries")), rows.size());
  EXPECT_NEAR(std::stod(s.at("mean_ttft")), ttft_sum / n, 1e-12);
  EXPECT_EQ(std::stod(s.at("p50_ttft")), nearest(50));
  EXPECT_EQ(std::stod(s.at("p99_ttft")), nearest(99));
  EXPECT_NEAR(std::stod(s.at("mean_tpot")), tpot_sum / static_cast<double>(tpot_n), 1e-12);
  EXPECT_NEAR(std::stod(s.at("kv_hit_rate")), static_cast<double>(hits) / static_cast<double>(blocks), 1e-12);
  EXPECT_NEAR(std::stod(s.at("lora_hit_rate")), static_cast<double>(lora_hits) / n, 1e-12);
  EXPECT_NEAR(std::stod(s.at("invalid_kv_mean")), invalid / static_cast<double>(util.size()), 1e-12);
  EXPECT_EQ(std::stoul(s.at("swaps")), csv_rows(slurp(out / "swaps.csv")).size());
}

TEST(CmdCompare, OneRowPerPolicyOnOneWorkload) {
  const fs::path out = fresh_dir("cmp");
  std::ostringstream o;
  std::ostringstream e;
  ASSERT_EQ(cmd_compare(kScenarios + "/uniform.json", {}, small(out), o, e), kExitOk) << e.str();
  std::vector<std::string> h;
  const auto rows = csv_rows(slurp(out / "compare.csv"), &h);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0][0], "fastlibra");
  EXPECT_EQ(rows[1][0], "static_lru");
  EXPECT_EQ(rows[2][0], "no_history");
  const auto kv = static_cast<std::size_t>(std::find(h.begin(), h.end(), "kv_hit_rate") - h.begin());
  EXPECT_EQ(std::stod(rows[2][kv]), 0.0);
  std::string hash;
  for (const char* p : {"fastlibra", "static_lru", "no_history"}) {
    const auto s = parse_summary(slurp(out / p / "summary.txt"));
    if (hash.empty()) hash = s.at("workload_hash");
    EXPECT_EQ(s.at("workload_hash"), hash) << p;
  }
  EXPECT_NE(o.str().find("workload_hash=" + hash), std::string::npos);

  // Serial and threaded runs print the same table.
  const fs::path again = fresh_dir("cmp2");
  std::ostringstream o2;
  ASSERT_EQ(cmd_compare(kScenarios + "/uniform.json", {}, small(again), o2, e, false), kExitOk);
  EXPECT_EQ(slurp(out / "compare.csv"), slurp(again / "compare.csv"));
}

TEST(CmdCompare, UnknownPolicyFailsBeforeRunning) {
  const fs::path out = fresh_dir("cmpbad");
  std::ostringstream o;
  std::ostringstream e;
  EXPECT_EQ(cmd_compare(kScenarios + "/uniform.json", {"fastlibra", "mru"}, small(out), o, e), kExitConfig);
  EXPECT_FALSE(fs::exists(out / "compare.csv"));
}

TEST(CmdSweep, ZeroCostReachesHighestRate) {
  const fs::path out = fresh_dir("sweep");
  std::vector<std::string> sets = small(out, 150);
  for (const char* s : {"latency.prefill_per_token=0", "latency.decode_per_token=0", "latency.base_step=0",
                        "pool.pcie_bandwidth=1e18"}) {
    sets.push_back(s);
  }
  std::ostringstream o;
  std::ostringstream e;
  ASSERT_EQ(cmd_sweep(kScenarios + "/uniform.json", {0.5, 1.0, 2.0, 3.0}, "", sets, o, e), kExitOk) << e.str();
  EXPECT_EQ(csv_rows(slurp(out / "sweep.csv")).size(), 4u);
  EXPECT_NE(o.str().find("peak_rate=3"), std::string::npos) << o.str();
}

TEST(CmdSweep, RateListValidated) {
  const fs::path out = fresh_dir("sweepbad");
  std::ostringstream o;
  std::ostringstream e;
  EXPECT_EQ(cmd_sweep(kScenarios + "/uniform.json", {}, "", small(out), o, e), kExitConfig);
  EXPECT_EQ(cmd_sweep(kScenarios + "/uniform.json", {2.0, 1.0}, "", small(out), o, e), kExitConfig);
  EXPECT_EQ(cmd_sweep(kScenarios + "/trace_replay.json", {1.0}, "", {"output_dir=" + out.string()}, o, e),
            kExitConfig);
}

TEST(CmdGen, DeterministicAndReplayable) {
  const fs::path dir = fresh_dir("gen");
  std::ostringstream o;
  std::ostringstream e;
  const std::vector<std::string> sets{"workload.max_queries=200"};
  ASSERT_EQ(cmd_gen(kScenarios + "/skewed.json", (dir / "a.jsonl").string(), sets, o, e), kExitOk) << e.str();
  ASSERT_EQ(cmd_gen(kScenarios + "/skewed.json", (dir / "b.jsonl").string(), sets, o, e), kExitOk);
  const std::string a = slurp(dir / "a.jsonl");
  EXPECT_EQ(a, slurp(dir / "b.jsonl"));
  std::istringstream in(a);
  const auto records = read_trace(in);
  EXPECT_EQ(records.size(), 200u);
  EXPECT_EQ(trace_text(records), a);

  // The generated trace replays through a trace config with the same hash.
  const fs::path cfg = write_config(dir, R"({"pool":{"hbm_blocks":600,"main_blocks":6000,"block_tokens":32,
    "block_bytes":16777216,"pcie_bandwidth":8e9},"lora":{"bytes_per_rank":8388608,"ranks":[32,64]},
    "trace":{"path":"a.jsonl"},"output_dir":")" + (dir / "out").string() + R"("})");
  std::ostringstream ro;
  ASSERT_EQ(cmd_run(cfg.string(), {}, ro, e), kExitOk) << e.str();
  EXPECT_EQ(parse_summary(ro.str()).at("workload_hash"), format_hex(workload_hash(records)));
  EXPECT_EQ(parse_summary(ro.str()).at("n_queries"), "200");
}

TEST(CmdGen, RejectsNonPositiveSigma) {
  const fs::path dir = fresh_dir("gensig");
  std::ostringstream o;
  std::ostringstream e;
  EXPECT_EQ(cmd_gen(kScenarios + "/skewed.json", (dir / "x.jsonl").string(), {"workload.distribution.sigma=0"}, o, e),
            kExitConfig);
  EXPECT_NE(e.str().find("sigma"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "x.jsonl"));
}

TEST(Binary, ExitCodes) {
  const fs::path out = fresh_dir("bin");
  const std::string uniform = kScenarios + "/uniform.json";
  EXPECT_EQ(run_binary("run " + uniform + " --set output_dir=" + out.string() + " --set workload.max_queries=50"), 0);
  EXPECT_TRUE(fs::exists(out / "summary.txt"));
  EXPECT_EQ(run_binary("run " + uniform + " --set swapper.lower_threshold=0.99"), 2);
  EXPECT_EQ(run_binary("frobnicate"), 2);
  EXPECT_EQ(run_binary(""), 2);
  EXPECT_EQ(run_binary("sweep " + uniform + " --set output_dir=" + out.string()), 2);
}

}  // namespace
}  // namespace lorasim
