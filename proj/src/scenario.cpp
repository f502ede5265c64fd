// SPDX-License-Identifier: Apache-2.0
#include "paft/scenario.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace paft {

using nlohmann::json;

std::string_view to_string(FailureKind kind) noexcept {
  switch (kind) {
    case FailureKind::kKillReplica: return "kill_replica";
    case FailureKind::kHangRank: return "hang_rank";
    case FailureKind::kDropLinks: return "drop_links";
  }
  return "unknown";
}

FailureKind parse_failure_kind(std::string_view name) {
  if (name == "kill_replica") return FailureKind::kKillReplica;
  if (name == "hang_rank") return FailureKind::kHangRank;
  if (name == "drop_links") return FailureKind::kDropLinks;
  throw ConfigError("unknown failure kind '" + std::string(name) + "'");
}

DataSpec Scenario::data_spec() const {
  DataSpec d;
  d.seed = data_seed;
  d.micro_batch = micro_batch;
  d.input_dim = dims.input;
  d.output_dim = dims.output;
  return d;
}

std::uint32_t Scenario::preferred_writer() const {
  return checkpoint_writers.empty() ? 0 : checkpoint_writers.front();
}

std::vector<std::uint32_t> failure_victims(const Scenario& s, const FailureSpec& f) {
  std::vector<std::uint32_t> v = f.replicas;
  if (v.empty()) {
    for (std::uint32_t i = 0; i < f.concurrent_replicas && i < s.num_replicas; ++i) {
      v.push_back(s.num_replicas - 1 - i);
    }
  }
  std::sort(v.begin(), v.end());
  return v;
}

std::vector<FaultRule> scenario_fault_rules(const Scenario& s) {
  std::vector<FaultRule> rules = s.link_faults;
  for (const auto& f : s.failures) {
    if (f.kind != FailureKind::kDropLinks) continue;
    for (auto r : failure_victims(s, f)) {
      FaultRule rule;
      rule.replica_id = r;
      rule.rank = f.rank;
      rule.kind = FaultKind::kDropConnection;
      rule.at_step = f.at_step;
      rule.duration_steps = f.duration_steps;
      rules.push_back(rule);
    }
  }
  return rules;
}

void validate(const Scenario& s) {
  auto fail = [](const std::string& msg) { throw ConfigError("scenario: " + msg); };
  if (s.num_replicas < 1) fail("topology.num_replicas must be >= 1");
  if (s.ranks_per_replica < 1) fail("topology.ranks_per_replica must be >= 1");
  if (s.dims.input < 1 || s.dims.hidden < 1 || s.dims.output < 1) {
    fail("topology.model_dims must all be >= 1");
  }
  if (s.micro_batch < 1) fail("topology.micro_batch must be >= 1");
  if (s.total_steps < 1) fail("total_steps must be >= 1");
  if (!(s.lr.initial_lr > 0.0f)) fail("lr.initial must be > 0");
  if (!(s.lr.final_fraction > 0.0f) || s.lr.final_fraction > 1.0f) {
    fail("lr.final_fraction must be in (0, 1]");
  }
  const auto& t = s.timeouts;
  for (auto [v, name] : {std::pair{t.detection, "detection_ms"},
                         std::pair{t.join_wait_limit, "join_wait_limit_ms"},
                         std::pair{t.quorum_deadline, "quorum_deadline_ms"},
                         std::pair{t.per_chunk, "per_chunk_ms"},
                         std::pair{t.connect, "connect_ms"}}) {
    if (v.count() <= 0) fail(std::string("timeouts.") + name + " must be > 0");
  }
  if (s.allocation_delay.count() < 0) fail("allocation_delay_ms must be >= 0");
  if (s.checkpoint_writers.size() > 1) {
    fail("only one replica may be configured as checkpoint writer");
  }
  if (!s.checkpoint_writers.empty() && s.checkpoint_writers.front() >= s.num_replicas) {
    fail("checkpoint writer is not a replica");
  }
  if (s.retry_budget < 1) fail("retry_budget must be >= 1");
  if (s.eval_rows < 1) fail("eval_rows must be >= 1");
  if (s.halt_at_step && *s.halt_at_step >= s.total_steps) fail("halt_at_step must be < total_steps");
  PipelineConfig p = s.pipeline;
  p.per_chunk_timeout = t.per_chunk;
  p.validate();

  // Replica downtime windows, to catch overlap and all-down schedules.
  std::map<std::uint32_t, std::vector<std::pair<std::uint64_t, std::uint64_t>>> down;
  for (std::size_t i = 0; i < s.failures.size(); ++i) {
    const auto& f = s.failures[i];
    const std::string at = "failures[" + std::to_string(i) + "]";
    if (f.duration_steps < 1) fail(at + ".duration_steps must be >= 1");
    if (f.at_step + f.duration_steps > s.total_steps) {
      fail(at + ": at_step + duration_steps exceeds total_steps");
    }
    if (f.concurrent_replicas < 1) fail(at + ".concurrent_replicas must be >= 1");
    if (f.concurrent_replicas >= s.num_replicas) {
      fail(at + ".concurrent_replicas must be < num_replicas");
    }
    if (!f.replicas.empty()) {
      if (f.replicas.size() != f.concurrent_replicas) {
        fail(at + ".replicas must list concurrent_replicas ids");
      }
      std::set<std::uint32_t> uniq(f.replicas.begin(), f.replicas.end());
      if (uniq.size() != f.replicas.size()) fail(at + ".replicas has duplicates");
      if (*uniq.rbegin() >= s.num_replicas) fail(at + ".replicas names an unknown replica");
    }
    if (f.kind == FailureKind::kDropLinks) {
      if (f.rank != kAnyRank && f.rank >= s.ranks_per_replica) fail(at + ".rank out of range");
      continue;
    }
    if (f.rank >= s.ranks_per_replica) fail(at + ".rank out of range");
    for (auto r : failure_victims(s, f)) {
      down[r].emplace_back(f.at_step, f.at_step + f.duration_steps);
    }
  }
  std::map<std::uint64_t, int> delta;
  for (auto& [r, windows] : down) {
    std::sort(windows.begin(), windows.end());
    for (std::size_t k = 1; k < windows.size(); ++k) {
      if (windows[k].first < windows[k - 1].second) {
        fail("failures overlap on replica " + std::to_string(r));
      }
    }
    for (const auto& [a, b] : windows) {
      ++delta[a];
      --delta[b];
    }
  }
  int concurrent = 0;
  for (const auto& [step, d] : delta) {
    concurrent += d;
    if (concurrent >= static_cast<int>(s.num_replicas)) {
      fail("failure schedule takes down every replica at step " + std::to_string(step));
    }
  }
  validate_fault_rules(scenario_fault_rules(s));
}

namespace {

std::string steps_label(std::uint64_t n) {
  if (n >= 1000 && n % 1000 == 0) return std::to_string(n / 1000) + "k";
  return std::to_string(n);
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("scenario: " + where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }) ==
        allowed.end()) {
      throw ConfigError("scenario: unknown field '" + where + (where.empty() ? "" : ".") + k + "'");
    }
  }
}

template <typename T>
void get(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void get_ms(const json& j, const char* key, Millis& out) {
  if (j.contains(key)) out = Millis{j.at(key).get<std::int64_t>()};
}

}  // namespace

std::string scenario_label(const Scenario& s) {
  std::uint64_t len = 0;
  std::uint32_t con = 0;
  for (const auto& f : s.failures) {
    len = std::max(len, f.duration_steps);
    con = std::max(con, f.concurrent_replicas);
  }
  std::ostringstream os;
  os << "d" << s.failures.size() << "x_f32_for" << steps_label(len) << "_" << con << "reps_lr_"
     << to_string(s.lr.intervention);
  return os.str();
}

Scenario scenario_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
  Scenario s;
  try {
    check_keys(j,
               {"name", "topology", "failures", "lr_intervention", "lr", "seeds", "timeouts",
                "checkpoint_interval", "checkpoint_writers", "total_steps", "allocation_delay_ms",
                "pipeline", "retry_budget", "link_faults", "base_latency_ms", "halt_at_step",
                "restore", "eval_rows"},
               "");
    get(j, "name", s.name);
    if (j.contains("topology")) {
      const auto& t = j.at("topology");
      check_keys(t, {"num_replicas", "ranks_per_replica", "model_dims", "micro_batch"}, "topology");
      get(t, "num_replicas", s.num_replicas);
      get(t, "ranks_per_replica", s.ranks_per_replica);
      get(t, "micro_batch", s.micro_batch);
      if (t.contains("model_dims")) {
        const auto d = t.at("model_dims").get<std::vector<std::size_t>>();
        if (d.size() != 3) throw ConfigError("scenario: topology.model_dims needs 3 entries");
        s.dims = ModelDims{d[0], d[1], d[2]};
      }
    }
    if (j.contains("failures")) {
      for (const auto& fj : j.at("failures")) {
        check_keys(fj, {"at_step", "duration_steps", "concurrent_replicas", "kind", "replicas", "rank"},
                   "failures[]");
        FailureSpec f;
        get(fj, "at_step", f.at_step);
        get(fj, "duration_steps", f.duration_steps);
        get(fj, "concurrent_replicas", f.concurrent_replicas);
        get(fj, "replicas", f.replicas);
        if (fj.contains("kind")) f.kind = parse_failure_kind(fj.at("kind").get<std::string>());
        if (fj.contains("rank")) {
          f.rank = fj.at("rank").is_string() && fj.at("rank") == "any"
                       ? kAnyRank
                       : fj.at("rank").get<std::uint32_t>();
        } else if (f.kind == FailureKind::kDropLinks) {
          f.rank = kAnyRank;
        }
        s.failures.push_back(f);
      }
    }
    if (j.contains("lr_intervention")) {
      s.lr.intervention = parse_intervention(j.at("lr_intervention").get<std::string>());
    }
    if (j.contains("lr")) {
      const auto& l = j.at("lr");
      check_keys(l, {"initial", "decay_horizon", "final_fraction"}, "lr");
      get(l, "initial", s.lr.initial_lr);
      get(l, "decay_horizon", s.lr.decay_horizon);
      get(l, "final_fraction", s.lr.final_fraction);
    }
    if (j.contains("seeds")) {
      const auto& sd = j.at("seeds");
      check_keys(sd, {"model", "data"}, "seeds");
      get(sd, "model", s.model_seed);
      get(sd, "data", s.data_seed);
    }
    if (j.contains("timeouts")) {
      const auto& t = j.at("timeouts");
      check_keys(t, {"detection_ms", "join_wait_limit_ms", "quorum_deadline_ms", "per_chunk_ms", "connect_ms"},
                 "timeouts");
      get_ms(t, "detection_ms", s.timeouts.detection);
      get_ms(t, "join_wait_limit_ms", s.timeouts.join_wait_limit);
      get_ms(t, "quorum_deadline_ms", s.timeouts.quorum_deadline);
      get_ms(t, "per_chunk_ms", s.timeouts.per_chunk);
      get_ms(t, "connect_ms", s.timeouts.connect);
    }
    get(j, "checkpoint_interval", s.checkpoint_interval);
    get(j, "checkpoint_writers", s.checkpoint_writers);
    get(j, "total_steps", s.total_steps);
    get_ms(j, "allocation_delay_ms", s.allocation_delay);
    if (j.contains("pipeline")) {
      const auto& p = j.at("pipeline");
      check_keys(p, {"chunk_bytes", "num_chunks"}, "pipeline");
      get(p, "chunk_bytes", s.pipeline.chunk_bytes);
      get(p, "num_chunks", s.pipeline.num_chunks);
    }
    get(j, "retry_budget", s.retry_budget);
    if (j.contains("link_faults")) {
      for (const auto& rj : j.at("link_faults")) {
        check_keys(rj, {"replica_id", "rank", "kind", "at_step", "duration_steps", "latency_multiplier"},
                   "link_faults[]");
        FaultRule r;
        get(rj, "replica_id", r.replica_id);
        if (rj.contains("rank")) {
          r.rank = rj.at("rank").is_string() && rj.at("rank") == "any"
                       ? kAnyRank
                       : rj.at("rank").get<std::uint32_t>();
        }
        if (rj.contains("kind")) r.kind = parse_fault_kind(rj.at("kind").get<std::string>());
        get(rj, "at_step", r.at_step);
        get(rj, "duration_steps", r.duration_steps);
        get(rj, "latency_multiplier", r.latency_multiplier);
        s.link_faults.push_back(r);
      }
    }
    get(j, "base_latency_ms", s.base_latency_ms);
    if (j.contains("halt_at_step") && !j.at("halt_at_step").is_null()) {
      s.halt_at_step = j.at("halt_at_step").get<std::uint64_t>();
    }
    get(j, "restore", s.restore);
    get(j, "eval_rows", s.eval_rows);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
  s.pipeline.per_chunk_timeout = s.timeouts.per_chunk;
  if (s.name.empty()) s.name = scenario_label(s);
  validate(s);
  return s;
}

std::string scenario_to_json(const Scenario& s) {
  json j;
  j["name"] = s.name;
  j["topology"] = {{"num_replicas", s.num_replicas},
                   {"ranks_per_replica", s.ranks_per_replica},
                   {"model_dims", {s.dims.input, s.dims.hidden, s.dims.output}},
                   {"micro_batch", s.micro_batch}};
  j["failures"] = json::array();
  for (const auto& f : s.failures) {
    json fj = {{"at_step", f.at_step},
               {"duration_steps", f.duration_steps},
               {"concurrent_replicas", f.concurrent_replicas},
               {"kind", std::string(to_string(f.kind))},
               {"replicas", f.replicas}};
    if (f.rank == kAnyRank) {
      fj["rank"] = "any";
    } else {
      fj["rank"] = f.rank;
    }
    j["failures"].push_back(fj);
  }
  j["lr_intervention"] = std::string(to_string(s.lr.intervention));
  j["lr"] = {{"initial", s.lr.initial_lr},
             {"decay_horizon", s.lr.decay_horizon},
             {"final_fraction", s.lr.final_fraction}};
  j["seeds"] = {{"model", s.model_seed}, {"data", s.data_seed}};
  j["timeouts"] = {{"detection_ms", s.timeouts.detection.count()},
                   {"join_wait_limit_ms", s.timeouts.join_wait_limit.count()},
                   {"quorum_deadline_ms", s.timeouts.quorum_deadline.count()},
                   {"per_chunk_ms", s.timeouts.per_chunk.count()},
                   {"connect_ms", s.timeouts.connect.count()}};
  j["checkpoint_interval"] = s.checkpoint_interval;
  j["checkpoint_writers"] = s.checkpoint_writers;
  j["total_steps"] = s.total_steps;
  j["allocation_delay_ms"] = s.allocation_delay.count();
  j["pipeline"] = {{"chunk_bytes", s.pipeline.chunk_bytes}, {"num_chunks", s.pipeline.num_chunks}};
  j["retry_budget"] = s.retry_budget;
  j["link_faults"] = json::array();
  for (const auto& r : s.link_faults) {
    json rj = {{"replica_id", r.replica_id},
               {"kind", std::string(to_string(r.kind))},
               {"at_step", r.at_step},
               {"duration_steps", r.duration_steps},
               {"latency_multiplier", r.latency_multiplier}};
    if (r.rank == kAnyRank) {
      rj["rank"] = "any";
    } else {
      rj["rank"] = r.rank;
    }
    j["link_faults"].push_back(rj);
  }
  j["base_latency_ms"] = s.base_latency_ms;
  if (s.halt_at_step) j["halt_at_step"] = *s.halt_at_step;
  j["restore"] = s.restore;
  j["eval_rows"] = s.eval_rows;
  return j.dump(2);
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read scenario file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return scenario_from_json(ss.str());
}

}  // namespace paft
