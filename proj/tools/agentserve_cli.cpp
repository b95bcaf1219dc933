// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "agentserve/harness.hpp"

namespace fs = std::filesystem;
using namespace agentserve;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool csv = false;
  bool trace = false;
  unsigned threads = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("config", c.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Override the config seed");
  cmd->add_option("--out", c.out, "Output directory (default: config 'output')");
  cmd->add_flag("--csv", c.csv, "Print the report as CSV on stdout");
  cmd->add_flag("--trace", c.trace, "Write event traces");
  cmd->add_option("--threads", c.threads, "Parallel runs (0 = all cores)");
}

ExperimentConfig load(const Common& c) {
  auto cfg = load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.workload.seed = *c.seed;
  }
  if (!c.out.empty()) cfg.output = c.out;
  return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

void print_table(const Report& rep) {
  std::printf("%-6s %-8s %-14s %-18s %8s %8s %10s %10s %10s %6s\n", "load", "rate", "policy", "load_balancing",
              "done", "offered", "goodput", "p90_ms", "p90_int_ms", "sw");
  for (const auto& r : rep.rows) {
    std::printf("%-6.2f %-8.3f %-14s %-18s %8lld %8lld %10.4f %10.1f %10.1f %6lld%s\n", r.load_point, r.rate_rps,
                r.policy.c_str(), r.load_balancing.c_str(), static_cast<long long>(r.completed),
                static_cast<long long>(r.offered), r.goodput_rps, r.p90_e2e_ms, r.p90_e2e_interactive_ms,
                static_cast<long long>(r.mode_switches), r.winner ? "  *" : "");
  }
}

int emit(const Common& c, const ExperimentConfig& cfg, const ExperimentResult& res) {
  const fs::path dir = cfg.output;
  fs::create_directories(dir);
  write_text(dir / "report.csv", res.report.to_csv());
  if (c.trace) {
    for (std::size_t i = 0; i < res.runs.size(); ++i) {
      const auto& run = res.runs[i];
      const std::string csv = trace_to_csv(run.trace);
      if (i == 0) write_text(dir / "trace.csv", csv);
      char name[160];
      std::snprintf(name, sizeof name, "trace_%s_%s_%zu.csv", run.policy.c_str(),
                    std::string(to_string(run.load_balancing)).c_str(), i);
      write_text(dir / name, csv);
    }
  }
  if (c.csv) {
    std::cout << res.report.to_csv();
  } else {
    print_table(res.report);
    std::printf("wrote %s\n", (dir / "report.csv").string().c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"agentserve: software-defined agentic serving simulator"};
  app.require_subcommand(1);

  Common run_opts, cmp_opts;
  auto* run = app.add_subcommand("run", "Run every load point under every policy");
  add_common(run, run_opts);
  auto* cmp = app.add_subcommand("compare", "Run and rank policies per load point");
  add_common(cmp, cmp_opts);

  std::string cap_config, cap_mode;
  std::optional<std::uint64_t> cap_seed;
  auto* cap = app.add_subcommand("capacity", "Analytic capacity bound for a communication mode");
  cap->add_option("config", cap_config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cap->add_option("--mode", cap_mode, "batch_all | per_function | token_stream | token_stream(N)")->required();
  cap->add_option("--seed", cap_seed, "Accepted for symmetry; capacity is analytic");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto cfg = load(run_opts);
      RunOptions o{run_opts.threads, run_opts.trace};
      return emit(run_opts, cfg, run_experiment(cfg, o));
    }
    if (*cmp) {
      const auto cfg = load(cmp_opts);
      if (cfg.policies.size() < 2) {
        std::fprintf(stderr, "compare needs at least two policies\n");
        return 2;
      }
      RunOptions o{cmp_opts.threads, cmp_opts.trace};
      const auto res = compare_modes(cfg, o);
      emit(cmp_opts, cfg, res);
      if (!cmp_opts.csv) {
        for (const auto& r : res.report.rows) {
          if (r.winner) {
            std::printf("winner load=%.2f lb=%s: %s\n", r.load_point, r.load_balancing.c_str(), r.policy.c_str());
          }
        }
      }
      return 0;
    }
    if (*cap) {
      const auto cfg = load_config(cap_config);
      const auto mode = Granularity::parse(cap_mode);
      std::printf("%.6f\n", compute_capacity(cfg, mode));
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", std::string(to_string(e.code())).c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
