// SPDX-License-Identifier: Apache-2.0
// paft: scenario runner, benchmarks and analysis tools.

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "paft/harness.hpp"
#include "paft/metrics.hpp"
#include "paft/quorum.hpp"

namespace fs = std::filesystem;
using namespace paft;

namespace {

std::vector<CurvePoint> load_curve(const fs::path& p) {
  return read_curve_csv(fs::is_directory(p) ? p / "curve.csv" : p);
}

int cmd_run(const std::string& config, std::string run_dir, double time_limit_s) {
  const Scenario s = load_scenario(config);
  if (run_dir.empty()) run_dir = "runs/" + (s.name.empty() ? scenario_label(s) : s.name);
  RunOptions opts;
  opts.run_dir = run_dir;
  opts.binary = self_executable();
  opts.time_limit = Millis{static_cast<std::int64_t>(time_limit_s * 1000)};
  const auto report = run_scenario(s, opts);
  std::cout << summary_json(report) << "\n";
  for (const auto& v : report.violations) std::cerr << "violation: " << v << "\n";
  return report.exit_code;
}

int cmd_bench(std::vector<std::uint32_t> members, std::vector<std::size_t> sizes_mib,
              std::uint32_t reps, std::size_t chunk_bytes, std::uint32_t num_chunks,
              std::size_t mem_limit_mib) {
  PipelineConfig chunked;
  chunked.chunk_bytes = chunk_bytes;
  chunked.num_chunks = num_chunks;
  std::printf("%-4s %10s %14s %14s %8s\n", "N", "MiB", "chunked_GB/s", "naive_GB/s", "ratio");
  for (auto mib : sizes_mib) {
    for (auto n : members) {
      // Peak of the naive run: each member holds its buffer and a message-sized
      // work area, plus a couple of segment frames in flight.
      if (2 * mib * n + 2 * mib > mem_limit_mib) {
        std::printf("%-4u %10zu %14s %14s %8s\n", n, mib, "skipped", "memory", "-");
        continue;
      }
      const std::size_t bytes = mib << 20;
      const auto a = bench_ftar(n, bytes, chunked, reps);
      // One message per ring step: a single chunk as large as a segment.
      PipelineConfig naive;
      naive.num_chunks = 1;
      naive.chunk_bytes = ((bytes / sizeof(float) + n - 1) / n) * sizeof(float);
      const auto b = bench_ftar(n, bytes, naive, reps);
      std::printf("%-4u %10zu %14.3f %14.3f %8.3f\n", n, mib, a.mean_gbps, b.mean_gbps,
                  b.mean_gbps > 0 ? a.mean_gbps / b.mean_gbps : 0.0);
      std::fflush(stdout);
    }
  }
  return 0;
}

int cmd_compare(const std::string& a, const std::string& b, double threshold) {
  const auto ca = load_curve(a);
  const auto cb = load_curve(b);
  const auto cmp = accuracy_compare(ca, cb, threshold);
  std::printf("tokens %llu\nfinal_a %.6f\nfinal_b %.6f\nrelative_diff %.6f\nidentical %s\n%s\n",
              static_cast<unsigned long long>(cmp.tokens), cmp.final_a, cmp.final_b,
              cmp.relative_diff, cmp.identical ? "yes" : "no",
              cmp.diverged ? "DIVERGED" : "within threshold");
  return cmp.diverged ? 3 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"paft: fault-tolerant data-parallel training on a desk"};
  app.require_subcommand(1);

  std::string config, run_dir;
  double time_limit_s = 1800;
  auto* run = app.add_subcommand("run", "run a scenario");
  run->add_option("config", config, "scenario JSON")->required();
  run->add_option("--run-dir", run_dir, "output directory");
  run->add_option("--time-limit", time_limit_s, "seconds before the run is abandoned");

  std::vector<std::uint32_t> members{2, 4, 8, 16};
  std::vector<std::size_t> sizes{256, 512, 1024};
  std::uint32_t reps = 3;
  std::size_t chunk_bytes = 8 << 20;
  std::uint32_t num_chunks = 4;
  std::size_t mem_limit = 4096;
  auto* bench = app.add_subcommand("bench-ftar", "FTAR bandwidth grid on a loopback ring");
  bench->add_option("--members", members, "ring sizes")->delimiter(',');
  bench->add_option("--sizes-mib", sizes, "message sizes in MiB")->delimiter(',');
  bench->add_option("--reps", reps, "all-reduces per cell");
  bench->add_option("--chunk-bytes", chunk_bytes, "S");
  bench->add_option("--num-chunks", num_chunks, "C");
  bench->add_option("--mem-limit-mib", mem_limit, "skip cells whose estimated peak exceeds this");

  std::uint32_t quorum_n = 0, rounds = 20;
  auto* emu = app.add_subcommand("emulate-quorum", "decision latency with N mock replicas");
  emu->add_option("N", quorum_n, "replicas")->required();
  emu->add_option("--rounds", rounds, "rounds to time");

  double f = 0, rp = 0, st = 0, nrep = 0;
  auto* eff = app.add_subcommand("calc-eff", "effective training time");
  eff->add_option("F", f, "failure interval")->required();
  eff->add_option("Rp", rp, "repair time")->required();
  eff->add_option("s", st, "full-stall time")->required();
  eff->add_option("N", nrep, "replicas")->required();

  std::string rep_a, rep_b;
  double threshold = 0.05;
  auto* cmp = app.add_subcommand("compare", "compare the loss curves of two runs");
  cmp->add_option("report_a", rep_a, "run directory or curve.csv")->required();
  cmp->add_option("report_b", rep_b, "run directory or curve.csv")->required();
  cmp->add_option("--threshold", threshold, "relative divergence threshold");

  std::uint32_t replica = 0, rank = 0, incarnation = 0;
  std::uint64_t join_step = 0;
  auto* rk = app.add_subcommand("rank", "one rank process (launched by run)");
  rk->add_option("--run-dir", run_dir)->required();
  rk->add_option("--replica", replica)->required();
  rk->add_option("--rank", rank)->required();
  rk->add_option("--incarnation", incarnation)->required();
  rk->add_option("--join-step", join_step);
  rk->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(config, run_dir, time_limit_s);
    if (*bench) return cmd_bench(members, sizes, reps, chunk_bytes, num_chunks, mem_limit);
    if (*emu) {
      const auto lat = emulate_quorum(quorum_n, rounds);
      std::printf("replicas %u\nrounds %u\np50_ms %.3f\np99_ms %.3f\nmax_ms %.3f\n", lat.replicas,
                  lat.rounds, lat.p50_ms, lat.p99_ms, lat.max_ms);
      return 0;
    }
    if (*eff) {
      const double e = compute_effective_training_time(f, rp, st, nrep);
      std::printf("effective_training_time %.6f (%.1f%%)\n", e, e * 100.0);
      return 0;
    }
    if (*cmp) return cmd_compare(rep_a, rep_b, threshold);
    if (*rk) return run_rank_process(load_rank_config(run_dir, replica, rank, incarnation, join_step));
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
