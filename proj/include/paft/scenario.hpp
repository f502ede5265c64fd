// SPDX-License-Identifier: Apache-2.0
#pragma once

// Declarative run description: topology, workload, failure schedule, timeouts.
// Stored as JSON.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "paft/ftar.hpp"
#include "paft/model.hpp"
#include "paft/transport.hpp"

namespace paft {

enum class FailureKind { kKillReplica, kHangRank, kDropLinks };

std::string_view to_string(FailureKind kind) noexcept;
FailureKind parse_failure_kind(std::string_view name);

struct FailureSpec {
  std::uint64_t at_step = 0;
  std::uint64_t duration_steps = 1;
  std::uint32_t concurrent_replicas = 1;
  FailureKind kind = FailureKind::kKillReplica;
  /// Victims. Empty means the highest `concurrent_replicas` replica ids.
  std::vector<std::uint32_t> replicas;
  /// Rank that hangs, or whose links drop. kAnyRank drops every rank's links.
  std::uint32_t rank = 0;
};

struct Timeouts {
  Millis detection{10000};
  Millis join_wait_limit{250};
  Millis quorum_deadline{2000};
  Millis per_chunk{5000};
  Millis connect{5000};
};

struct Scenario {
  std::string name;
  std::uint32_t num_replicas = 4;
  std::uint32_t ranks_per_replica = 2;
  ModelDims dims;
  std::uint32_t micro_batch = 8;
  std::vector<FailureSpec> failures;
  LrPolicy lr;
  std::uint64_t model_seed = 7;
  std::uint64_t data_seed = 11;
  Timeouts timeouts;
  std::uint64_t checkpoint_interval = 100;
  std::vector<std::uint32_t> checkpoint_writers;  // at most one; empty = replica 0
  std::uint64_t total_steps = 300;
  Millis allocation_delay{2000};
  PipelineConfig pipeline;
  std::uint32_t retry_budget = 3;
  /// Extra link rules beyond those derived from drop_links failures.
  std::vector<FaultRule> link_faults;
  double base_latency_ms = 0.0;
  /// Every rank exits when it reaches this step, as if the whole job died.
  std::optional<std::uint64_t> halt_at_step;
  /// Start from the latest persistent checkpoint instead of step 0.
  bool restore = false;
  std::uint32_t eval_rows = 64;

  DataSpec data_spec() const;
  std::uint32_t preferred_writer() const;
};

/// Victims of one failure, ascending.
std::vector<std::uint32_t> failure_victims(const Scenario& s, const FailureSpec& f);

/// Link rules implied by the scenario (drop_links failures plus link_faults).
std::vector<FaultRule> scenario_fault_rules(const Scenario& s);

/// Throws ConfigError naming the offending field.
void validate(const Scenario& s);

/// The freq_fp_len_con_lr label, e.g. "d1x_f32_for20_1reps_lr_sqrt".
std::string scenario_label(const Scenario& s);

Scenario scenario_from_json(const std::string& text);
std::string scenario_to_json(const Scenario& s);
Scenario load_scenario(const std::filesystem::path& path);

}  // namespace paft
