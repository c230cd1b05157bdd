// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lorasim/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"lorasim: Multi-LoRA serving cache simulator"};
  app.require_subcommand(1);

  std::string config;
  std::vector<std::string> overrides;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", config, "Scenario configuration (JSON)")->required();
    sub->add_option("--set", overrides, "Override a config key, e.g. --set swapper.upper_threshold=0.9");
  };

  auto* run = app.add_subcommand("run", "Run one scenario and write its metrics");
  add_common(run);

  std::vector<std::string> policies;
  bool serial = false;
  auto* compare = app.add_subcommand("compare", "Run several policies on the same workload");
  add_common(compare);
  compare->add_option("--policies", policies, "Policies to compare")->delimiter(',');
  compare->add_flag("--serial", serial, "Run policies one after another");

  std::vector<double> rates;
  std::string policy;
  auto* sweep = app.add_subcommand("sweep", "Find the peak rate with mean TTFT under 500 ms");
  add_common(sweep);
  sweep->add_option("--rates", rates, "Ascending arrival rates (queries/s)")->delimiter(',');
  sweep->add_option("--policy", policy, "Policy (defaults to the config's)");
  sweep->add_flag("--serial", serial, "Run rates one after another");

  std::string out_path;
  auto* gen = app.add_subcommand("gen", "Generate a trace file from a workload spec");
  add_common(gen);
  gen->add_option("-o,--out", out_path, "Output trace path (JSON lines)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : lorasim::kExitConfig;
  }

  if (*run) return lorasim::cmd_run(config, overrides, std::cout, std::cerr);
  if (*compare) return lorasim::cmd_compare(config, policies, overrides, std::cout, std::cerr, !serial);
  if (*sweep) return lorasim::cmd_sweep(config, rates, policy, overrides, std::cout, std::cerr, !serial);
  return lorasim::cmd_gen(config, out_path, overrides, std::cout, std::cerr);
}
