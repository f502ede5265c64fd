// SPDX-License-Identifier: Apache-2.0
#include "paft/harness.hpp"

#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fcntl.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <iostream>
#include <random>
#include <sstream>

#include "json.hpp"

extern char** environ;

namespace paft {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Rank ports stay fixed for the whole run, so they are taken below the
// ephemeral range where outgoing connections cannot collide with them.
std::vector<std::uint16_t> pick_rank_ports(std::size_t count) {
  std::mt19937 gen(std::random_device{}());
  std::uniform_int_distribution<int> base_dist(20000, 30000);
  std::vector<std::unique_ptr<Listener>> held;
  std::vector<std::uint16_t> ports;
  int port = base_dist(gen);
  while (ports.size() < count) {
    if (port > 32700) port = 15000;
    try {
      held.push_back(std::make_unique<Listener>(static_cast<std::uint16_t>(port)));
      ports.push_back(static_cast<std::uint16_t>(port));
    } catch (const Error&) {
    }
    ++port;
  }
  return ports;
}

std::string describe_status(int status) {
  if (WIFEXITED(status)) return "exit " + std::to_string(WEXITSTATUS(status));
  if (WIFSIGNALED(status)) return std::string("signal ") + ::strsignal(WTERMSIG(status));
  return "status " + std::to_string(status);
}

pid_t spawn_rank(const fs::path& binary, const fs::path& run_dir, std::uint32_t replica,
                 std::uint32_t rank, std::uint32_t incarnation, std::uint64_t join_step) {
  const fs::path log = run_dir / "logs" /
                       ("r" + std::to_string(replica) + "_k" + std::to_string(rank) + "_i" +
                        std::to_string(incarnation) + ".log");
  std::vector<std::string> args = {binary.string(),
                                   "rank",
                                   "--run-dir",
                                   run_dir.string(),
                                   "--replica",
                                   std::to_string(replica),
                                   "--rank",
                                   std::to_string(rank),
                                   "--incarnation",
                                   std::to_string(incarnation),
                                   "--join-step",
                                   std::to_string(join_step)};
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);

  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_addopen(&fa, 1, log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  posix_spawn_file_actions_adddup2(&fa, 1, 2);
  pid_t pid = -1;
  const int rc = ::posix_spawn(&pid, binary.c_str(), &fa, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&fa);
  if (rc != 0) {
    throw Error(Reason::kInternalInvariant,
                "cannot launch " + binary.string() + ": " + std::strerror(rc));
  }
  return pid;
}

struct RankProc {
  pid_t pid = -1;
  bool running = false;
  int status = 0;
};

constexpr Millis kStragglerGrace{5000};

struct ReplicaProcs {
  std::uint32_t incarnation = 0;
  std::uint64_t join_step = 0;  // action gate of the current incarnation
  std::vector<RankProc> ranks;
  bool up = false;
  bool finished = false;
  std::uint32_t unscheduled = 0;
};

std::map<std::string, std::string> read_kv(const fs::path& path) {
  std::map<std::string, std::string> out;
  std::ifstream in(path);
  std::string k, v;
  while (in >> k >> v) out[k] = v;
  return out;
}

}  // namespace

std::uint64_t replica_state_hash(const std::vector<std::uint64_t>& shard_hashes) {
  std::vector<std::byte> bytes(shard_hashes.size() * sizeof(std::uint64_t));
  std::memcpy(bytes.data(), shard_hashes.data(), bytes.size());
  return fnv1a(bytes);
}

std::vector<std::string> check_loader_ledger(const std::vector<LoaderStateRecord>& records,
                                             std::uint32_t ranks) {
  std::vector<std::string> out;
  std::map<std::uint32_t, LoaderStateRecord> last;
  for (const auto& r : records) {
    auto it = last.find(r.replica_id);
    const std::uint64_t expect_cursor = it == last.end() ? ranks : it->second.cursor + ranks;
    if (it != last.end() && r.step <= it->second.step) {
      out.push_back("loader_state: replica " + std::to_string(r.replica_id) + " step " +
                    std::to_string(r.step) + " recorded after step " +
                    std::to_string(it->second.step));
    }
    if (r.cursor != expect_cursor) {
      out.push_back("loader_state: replica " + std::to_string(r.replica_id) + " cursor " +
                    std::to_string(r.cursor) + " at step " + std::to_string(r.step) +
                    ", expected " + std::to_string(expect_cursor));
    }
    last[r.replica_id] = r;
  }
  return out;
}

fs::path self_executable() { return fs::read_symlink("/proc/self/exe"); }

void write_run_file(const fs::path& run_dir, const Scenario& s,
                    const std::vector<std::vector<Endpoint>>& endpoints,
                    const Endpoint& coordinator) {
  json j;
  j["scenario"] = json::parse(scenario_to_json(s));
  j["coordinator"] = coordinator.str();
  j["endpoints"] = json::array();
  for (const auto& rep : endpoints) {
    json row = json::array();
    for (const auto& e : rep) row.push_back(e.str());
    j["endpoints"].push_back(row);
  }
  const fs::path tmp = run_dir / "run.json.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, run_dir / "run.json");
}

RankConfig load_rank_config(const fs::path& run_dir, std::uint32_t replica, std::uint32_t rank,
                            std::uint32_t incarnation, std::uint64_t join_step) {
  std::ifstream in(run_dir / "run.json");
  if (!in) throw ConfigError("missing " + (run_dir / "run.json").string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run.json: ") + e.what());
  }
  RankConfig cfg;
  cfg.scenario = scenario_from_json(j.at("scenario").dump());
  cfg.replica_id = replica;
  cfg.rank = rank;
  cfg.incarnation = incarnation;
  cfg.join_step = join_step;
  cfg.coordinator = Endpoint::parse(j.at("coordinator").get<std::string>());
  for (const auto& row : j.at("endpoints")) {
    std::vector<Endpoint> eps;
    for (const auto& e : row) eps.push_back(Endpoint::parse(e.get<std::string>()));
    cfg.endpoints.push_back(std::move(eps));
  }
  cfg.run_dir = run_dir;
  if (replica >= cfg.scenario.num_replicas || rank >= cfg.scenario.ranks_per_replica) {
    throw ConfigError("replica or rank outside the run topology");
  }
  return cfg;
}

MetricsReport run_scenario(const Scenario& s, const RunOptions& opts) {
  validate(s);
  const fs::path dir = opts.run_dir;
  const std::uint32_t n = s.num_replicas;
  const std::uint32_t ranks = s.ranks_per_replica;
  const std::uint64_t end_step = s.halt_at_step ? std::min(*s.halt_at_step, s.total_steps)
                                                : s.total_steps;

  fs::create_directories(dir);
  fs::remove_all(dir / "ranks");
  fs::remove_all(dir / "logs");
  if (s.restore) {
    const auto ckpts = list_checkpoints(checkpoint_root(dir));
    if (ckpts.empty()) throw ConfigError("restore: no checkpoint under " + dir.string());
    LoaderStateLog(loader_state_path(dir)).truncate_after(ckpts.back());
  } else {
    fs::remove_all(checkpoint_root(dir));
    fs::remove(loader_state_path(dir));
  }
  fs::create_directories(dir / "ranks");
  fs::create_directories(dir / "logs");

  MetricsReport report;
  report.name = s.name;
  report.label = scenario_label(s);
  report.num_replicas = n;
  report.ranks_per_replica = ranks;
  report.micro_batch = s.micro_batch;
  report.total_steps = s.total_steps;

  CoordinatorOptions copts;
  copts.report_deadline = s.timeouts.quorum_deadline;
  Coordinator coord(copts);

  const auto ports = pick_rank_ports(static_cast<std::size_t>(n) * ranks);
  std::vector<std::vector<Endpoint>> endpoints(n);
  for (std::uint32_t r = 0; r < n; ++r) {
    for (std::uint32_t k = 0; k < ranks; ++k) {
      endpoints[r].push_back(Endpoint{"127.0.0.1", ports[r * ranks + k]});
    }
  }
  write_run_file(dir, s, endpoints, coord.endpoint());

  const auto t0 = SteadyClock::now();
  auto stamp = [&] {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3)
       << std::chrono::duration<double>(SteadyClock::now() - t0).count() << "s ";
    return os.str();
  };

  std::vector<ReplicaProcs> reps(n);
  auto launch = [&](std::uint32_t r, std::uint64_t coord_join, std::uint64_t gate) {
    auto& rp = reps[r];
    rp.join_step = gate;
    rp.ranks.assign(ranks, RankProc{});
    coord.expect(r, rp.incarnation, coord_join);
    for (std::uint32_t k = 0; k < ranks; ++k) {
      rp.ranks[k].pid = spawn_rank(opts.binary, dir, r, k, rp.incarnation, gate);
      rp.ranks[k].running = true;
    }
    rp.up = true;
  };
  auto kill_all = [&](ReplicaProcs& rp) {
    for (auto& p : rp.ranks) {
      if (!p.running) continue;
      ::kill(p.pid, SIGKILL);
      ::waitpid(p.pid, &p.status, 0);
      p.running = false;
    }
    rp.up = false;
  };

  for (std::uint32_t r = 0; r < n; ++r) launch(r, 0, 0);

  std::vector<bool> consumed(s.failures.size(), false);
  bool timed_out = false;
  // Set once any replica finishes. A replacement that is still starting has
  // no peer left to catch up from, so nothing is relaunched after this.
  std::optional<SteadyClock::time_point> complete_at;
  while (true) {
    bool active = false;
    for (std::uint32_t r = 0; r < n; ++r) {
      auto& rp = reps[r];
      if (!rp.up) continue;
      active = true;
      bool bad = false;
      bool killed = false;
      std::string why;
      for (std::uint32_t k = 0; k < ranks; ++k) {
        auto& p = rp.ranks[k];
        if (p.running && ::waitpid(p.pid, &p.status, WNOHANG) == p.pid) p.running = false;
        if (p.running) continue;
        const bool ok = WIFEXITED(p.status) && WEXITSTATUS(p.status) == 0;
        if (!ok) {
          bad = true;
          killed = killed || (WIFSIGNALED(p.status) && WTERMSIG(p.status) == SIGKILL);
          if (why.empty()) why = "rank " + std::to_string(k) + " " + describe_status(p.status);
        }
      }
      const bool all_exited = std::none_of(rp.ranks.begin(), rp.ranks.end(),
                                           [](const RankProc& p) { return p.running; });
      if (bad) {
        kill_all(rp);
        coord.mark_dead(r);
        std::optional<std::size_t> sched;
        for (std::size_t i = 0; i < s.failures.size() && killed; ++i) {
          const auto& f = s.failures[i];
          if (consumed[i] || f.kind != FailureKind::kKillReplica || f.at_step < rp.join_step) {
            continue;
          }
          const auto v = failure_victims(s, f);
          if (std::find(v.begin(), v.end(), r) == v.end()) continue;
          if (!sched || f.at_step < s.failures[*sched].at_step) sched = i;
        }
        ++rp.incarnation;
        if (complete_at) {
          report.events.push_back(stamp() + "replica " + std::to_string(r) + " failed after the run ended: " +
                                  why);
        } else if (sched) {
          consumed[*sched] = true;
          const auto& f = s.failures[*sched];
          const std::uint64_t join = f.at_step + f.duration_steps;
          report.events.push_back(stamp() + "replica " + std::to_string(r) +
                                  " down (scheduled kill at step " + std::to_string(f.at_step) +
                                  ")");
          if (join < end_step) {
            report.events.push_back(stamp() + "replica " + std::to_string(r) +
                                    " relaunched as incarnation " +
                                    std::to_string(rp.incarnation) + ", joins at step " +
                                    std::to_string(join));
            launch(r, join, join);
          }
        } else {
          report.events.push_back(stamp() + "replica " + std::to_string(r) + " failed: " + why);
          if (++rp.unscheduled <= opts.max_unscheduled_restarts) {
            report.events.push_back(stamp() + "replica " + std::to_string(r) +
                                    " relaunched as incarnation " +
                                    std::to_string(rp.incarnation) + ", joins when ready");
            launch(r, kJoinWhenReady, 0);
          } else {
            report.events.push_back(stamp() + "replica " + std::to_string(r) +
                                    " exceeded its restart budget");
          }
        }
      } else if (all_exited) {
        rp.up = false;
        rp.finished = true;
        coord.mark_dead(r);
        if (!complete_at) complete_at = SteadyClock::now();
        report.events.push_back(stamp() + "replica " + std::to_string(r) + " finished");
      }
    }
    if (!active) break;
    if (complete_at && SteadyClock::now() - *complete_at > kStragglerGrace) {
      for (std::uint32_t r = 0; r < n; ++r) {
        if (!reps[r].up) continue;
        kill_all(reps[r]);
        report.events.push_back(stamp() + "replica " + std::to_string(r) +
                                " stopped: still rejoining when the run ended");
      }
      break;
    }
    if (SteadyClock::now() - t0 > opts.time_limit) {
      for (auto& rp : reps) kill_all(rp);
      timed_out = true;
      break;
    }
    std::this_thread::sleep_for(Millis{5});
  }
  report.wall_s = std::chrono::duration<double>(SteadyClock::now() - t0).count();
  report.decisions = static_cast<std::uint32_t>(coord.history().size());
  report.rejected_reports = coord.rejected_reports();
  coord.stop();

  // ---- collect ----
  for (const auto& e : fs::directory_iterator(dir / "ranks")) {
    if (e.path().extension() == ".csv") {
      auto recs = read_attempt_csv(e.path());
      report.attempts.insert(report.attempts.end(), recs.begin(), recs.end());
    }
  }
  std::sort(report.attempts.begin(), report.attempts.end(), [](const auto& a, const auto& b) {
    return std::tie(a.step, a.replica_id, a.incarnation, a.attempt, a.rank) <
           std::tie(b.step, b.replica_id, b.incarnation, b.attempt, b.rank);
  });
  for (std::uint32_t r = 0; r < n; ++r) {
    std::vector<std::uint64_t> shard_hashes;
    std::uint64_t next = 0;
    for (std::uint32_t k = 0; k < ranks; ++k) {
      const auto kv = read_kv(rank_final_path(dir, r, k));
      if (!kv.count("shard_hash")) break;
      shard_hashes.push_back(std::stoull(kv.at("shard_hash")));
      if (k == 0) next = std::stoull(kv.at("next_step"));
    }
    if (shard_hashes.size() == ranks) {
      report.final_hashes[r] = replica_state_hash(shard_hashes);
      report.final_steps[r] = next;
    }
  }
  summarize(report);

  // ---- invariant probes ----
  auto& v = report.violations;
  if (timed_out) v.push_back("time limit exceeded");
  std::optional<std::uint64_t> ref_hash;
  for (const auto& [r, h] : report.final_hashes) {
    if (report.final_steps[r] != end_step) {
      v.push_back("replica " + std::to_string(r) + " stopped at step " +
                  std::to_string(report.final_steps[r]));
      continue;
    }
    if (!ref_hash) ref_hash = h;
    if (h != *ref_hash) v.push_back("replica " + std::to_string(r) + " final state hash differs");
  }
  const auto ledger = check_loader_ledger(LoaderStateLog(loader_state_path(dir)).read(), ranks);
  v.insert(v.end(), ledger.begin(), ledger.end());

  std::map<std::uint32_t, std::uint64_t> last_cursor;
  std::map<std::tuple<std::uint64_t, std::uint32_t, std::uint32_t, std::uint32_t>, std::uint64_t>
      retried_cursor;
  for (const auto& a : report.attempts) {
    if (a.phase == "train" && a.outcome == "retried") {
      if (a.hash_before != a.hash_after) {
        v.push_back("retried step " + std::to_string(a.step) + " changed replica " +
                    std::to_string(a.replica_id) + " rank " + std::to_string(a.rank));
      }
      retried_cursor[{a.step, a.replica_id, a.incarnation, a.rank}] = a.cursor;
    }
    if (a.phase == "train" && a.outcome == "committed") {
      auto rc = retried_cursor.find({a.step, a.replica_id, a.incarnation, a.rank});
      if (rc != retried_cursor.end() && rc->second != a.cursor) {
        v.push_back("replica " + std::to_string(a.replica_id) + " committed a different batch at step " +
                    std::to_string(a.step) + " than it retried");
      }
      if (a.rank == 0) {
        auto it = last_cursor.find(a.replica_id);
        if (it != last_cursor.end() && a.cursor != it->second + ranks) {
          v.push_back("replica " + std::to_string(a.replica_id) + " trained cursor " +
                      std::to_string(a.cursor) + " at step " + std::to_string(a.step) +
                      " after cursor " + std::to_string(it->second));
        }
        last_cursor[a.replica_id] = a.cursor;
      }
    }
  }

  if (!v.empty()) {
    report.exit_code = timed_out ? 4 : 3;
  } else if (report.final_hashes.empty()) {
    report.exit_code = 4;
    v.push_back("no replica finished");
  } else {
    report.exit_code = 0;
  }

  write_metrics_csv(report, dir / "metrics.csv");
  write_curve_csv(report.curve, dir / "curve.csv");
  std::ofstream(dir / "summary.json", std::ios::trunc) << summary_json(report) << '\n';
  return report;
}

}  // namespace paft
