// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run reports: per-step rows merged from the rank logs, aggregates, stall
// accounting and loss-curve comparison.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "paft/replica.hpp"

namespace paft {

/// (F - Rp + (Rp - s)(N-1)/N) / F. Requires 0 <= s <= Rp <= F, F > 0, N >= 1.
double compute_effective_training_time(double failure_interval, double repair_time,
                                       double full_stall, double replicas);

/// One row per replica per step attempt.
struct StepRow {
  std::uint64_t step = 0;
  std::uint32_t replica_id = 0;
  std::string phase;  // train | retry | catchup | left_behind
  double wall_ms = 0.0;
  std::uint32_t healthy_count = 0;
  std::uint64_t tokens_committed = 0;
  double loss = 0.0;  // mean over the replica's ranks
  double stall_ms = 0.0;
  std::string event;
};

struct CurvePoint {
  std::uint64_t step = 0;
  std::uint64_t tokens = 0;  // cumulative, all replicas
  double loss = 0.0;         // mean training loss of the step's trainers
  double eval_loss = 0.0;    // held-out loss after the step
};

struct MetricsReport {
  std::string name;
  std::string label;
  std::uint32_t num_replicas = 0;
  std::uint32_t ranks_per_replica = 0;
  std::uint32_t micro_batch = 0;
  std::uint64_t total_steps = 0;

  std::vector<AttemptRecord> attempts;  // every rank, every incarnation
  std::vector<StepRow> rows;
  std::vector<CurvePoint> curve;

  double median_step_ms = 0.0;
  double total_stall_ms = 0.0;
  std::vector<double> first_step_overhead_ms;  // one per rejoin
  double effective_training_time = 0.0;
  double final_loss = 0.0;
  double final_eval_loss = 0.0;
  std::uint64_t tokens_total = 0;
  std::map<std::uint32_t, std::uint64_t> final_hashes;  // replica -> state hash
  std::map<std::uint32_t, std::uint64_t> final_steps;   // replica -> next step
  std::uint64_t rejected_reports = 0;
  std::uint32_t decisions = 0;
  double wall_s = 0.0;
  std::vector<std::string> events;
  std::vector<std::string> violations;
  int exit_code = 0;
};

std::vector<AttemptRecord> read_attempt_csv(const std::filesystem::path& path);

/// Fills rows, curve and the aggregates that derive from them.
void summarize(MetricsReport& report);

struct StallBreakdown {
  double median_step_ms = 0.0;
  double failure_stall_ms = 0.0;
  double rejoin_stall_ms = 0.0;
  double first_step_overhead_ms = 0.0;
  std::uint64_t failure_step = 0;  // 0 with no failure
  std::uint64_t rejoin_step = 0;   // 0 with no rejoin
  double in_steps(double ms) const { return median_step_ms > 0 ? ms / median_step_ms : 0.0; }
};
StallBreakdown measure_stall(const MetricsReport& report);

struct AccuracyComparison {
  std::uint64_t tokens = 0;  // compared token count
  double final_a = 0.0;
  double final_b = 0.0;
  double relative_diff = 0.0;
  bool diverged = false;
  bool identical = false;
};
/// Compares held-out losses at A's final token count.
AccuracyComparison accuracy_compare(const std::vector<CurvePoint>& a,
                                    const std::vector<CurvePoint>& b, double threshold = 0.05);

/// Population standard deviation of eval_loss over steps [from, to).
double loss_stddev(const std::vector<CurvePoint>& curve, std::uint64_t from, std::uint64_t to);

void write_metrics_csv(const MetricsReport& r, const std::filesystem::path& path);
void write_curve_csv(const std::vector<CurvePoint>& curve, const std::filesystem::path& path);
std::vector<CurvePoint> read_curve_csv(const std::filesystem::path& path);
std::string summary_json(const MetricsReport& r);

}  // namespace paft
