// SPDX-License-Identifier: Apache-2.0
#include "paft/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <tuple>

#include "json.hpp"

namespace paft {

namespace fs = std::filesystem;
using nlohmann::json;

double compute_effective_training_time(double f, double rp, double s, double n) {
  if (!(f > 0.0)) throw ConfigError("failure interval F must be positive");
  if (!(s >= 0.0 && s <= rp && rp <= f)) {
    throw ConfigError("effective training time needs 0 <= s <= Rp <= F");
  }
  if (!(n >= 1.0)) throw ConfigError("replica count N must be at least 1");
  return (f - rp + (rp - s) * (n - 1.0) / n) / f;
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::string row_phase(const AttemptRecord& r) {
  if (r.phase == "train") return r.outcome == "committed" ? "train" : "retry";
  return r.outcome == "committed" ? "catchup" : "left_behind";
}

bool trained(const AttemptRecord& r) { return r.phase == "train" && r.outcome == "committed"; }

// Per step: the longest per-replica sum of wall time over that step's rows.
std::map<std::uint64_t, double> step_walls(const std::vector<StepRow>& rows) {
  std::map<std::pair<std::uint64_t, std::uint32_t>, double> per;
  for (const auto& r : rows) per[{r.step, r.replica_id}] += r.wall_ms;
  std::map<std::uint64_t, double> out;
  for (const auto& [k, w] : per) out[k.first] = std::max(out[k.first], w);
  return out;
}

}  // namespace

std::vector<AttemptRecord> read_attempt_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::vector<AttemptRecord> out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != 20) continue;  // torn last line of a killed rank
    AttemptRecord r;
    try {
      r.step = std::stoull(f[0]);
      r.attempt = static_cast<std::uint32_t>(std::stoul(f[1]));
      r.replica_id = static_cast<std::uint32_t>(std::stoul(f[2]));
      r.rank = static_cast<std::uint32_t>(std::stoul(f[3]));
      r.incarnation = static_cast<std::uint32_t>(std::stoul(f[4]));
      r.phase = f[5];
      r.outcome = f[6];
      r.wall_ms = std::stod(f[7]);
      r.step_ms = std::stod(f[8]);
      r.quorum_ms = std::stod(f[9]);
      r.ftar_ms = std::stod(f[10]);
      r.fetch_ms = std::stod(f[11]);
      r.healthy_count = static_cast<std::uint32_t>(std::stoul(f[12]));
      r.generation = static_cast<std::uint32_t>(std::stoul(f[13]));
      r.cursor = std::stoull(f[14]);
      r.loss = std::stof(f[15]);
      r.eval_loss = std::stof(f[16]);
      r.hash_before = std::stoull(f[17]);
      r.hash_after = std::stoull(f[18]);
      r.event = f[19];
    } catch (const std::exception&) {
      continue;
    }
    out.push_back(std::move(r));
  }
  return out;
}

void summarize(MetricsReport& report) {
  using Key = std::tuple<std::uint64_t, std::uint32_t, std::uint32_t, std::uint32_t>;
  std::map<Key, std::vector<const AttemptRecord*>> groups;
  for (const auto& a : report.attempts) {
    groups[{a.step, a.replica_id, a.incarnation, a.attempt}].push_back(&a);
  }
  const std::uint64_t tokens_per_commit =
      static_cast<std::uint64_t>(report.micro_batch) * report.ranks_per_replica;

  report.rows.clear();
  std::vector<double> steady;
  for (const auto& [key, recs] : groups) {
    const AttemptRecord* lead = nullptr;
    double loss = 0.0;
    for (const auto* r : recs) {
      if (r->rank == 0) lead = r;
      loss += r->loss;
    }
    if (!lead) continue;  // leader died before writing
    StepRow row;
    row.step = lead->step;
    row.replica_id = lead->replica_id;
    row.phase = row_phase(*lead);
    row.wall_ms = lead->wall_ms;
    row.healthy_count = lead->healthy_count;
    row.tokens_committed = trained(*lead) ? tokens_per_commit : 0;
    row.loss = loss / static_cast<double>(recs.size());
    row.event = lead->event;
    if (lead->incarnation > 0 && row.phase == "catchup") {
      row.event = "rejoin inc " + std::to_string(lead->incarnation) +
                  (row.event.empty() ? "" : " " + row.event);
    }
    if (row.phase == "train" && lead->attempt == 0) steady.push_back(row.wall_ms);
    report.rows.push_back(std::move(row));
  }
  std::stable_sort(report.rows.begin(), report.rows.end(),
                   [](const StepRow& a, const StepRow& b) { return a.step < b.step; });

  report.median_step_ms = median(steady);
  for (auto& r : report.rows) r.stall_ms = std::max(0.0, r.wall_ms - report.median_step_ms);

  // Excess below one nominal step is treated as noise.
  report.total_stall_ms = 0.0;
  double wall_total = 0.0;
  double progress = 0.0;
  std::map<std::uint64_t, std::uint32_t> trainers;
  for (const auto& r : report.rows) {
    if (r.phase == "train") ++trainers[r.step];
  }
  for (const auto& [step, w] : step_walls(report.rows)) {
    const double excess = w - report.median_step_ms;
    if (excess > report.median_step_ms) report.total_stall_ms += excess;
    wall_total += w;
    progress += report.median_step_ms * trainers[step] / std::max(1u, report.num_replicas);
  }
  report.effective_training_time =
      wall_total > 0.0 ? std::clamp(progress / wall_total, 1e-9, 1.0) : 0.0;

  // Curve: one point per step that some replica trained.
  report.curve.clear();
  std::map<std::uint64_t, std::vector<const AttemptRecord*>> committed;
  for (const auto& a : report.attempts) {
    if (trained(a)) committed[a.step].push_back(&a);
  }
  std::uint64_t tokens = 0;
  for (const auto& [step, recs] : committed) {
    CurvePoint p;
    p.step = step;
    std::map<std::uint32_t, bool> replicas;
    double loss = 0.0;
    const AttemptRecord* eval_src = nullptr;
    for (const auto* r : recs) {
      replicas[r->replica_id] = true;
      loss += r->loss;
      if (r->rank == 0 && (!eval_src || r->replica_id < eval_src->replica_id)) eval_src = r;
    }
    tokens += tokens_per_commit * replicas.size();
    p.tokens = tokens;
    p.loss = loss / static_cast<double>(recs.size());
    p.eval_loss = eval_src ? eval_src->eval_loss : 0.0;
    report.curve.push_back(p);
  }
  report.tokens_total = tokens;
  if (!report.curve.empty()) {
    report.final_loss = report.curve.back().loss;
    report.final_eval_loss = report.curve.back().eval_loss;
  }

  const auto stalls = measure_stall(report);
  report.first_step_overhead_ms.clear();
  if (stalls.rejoin_step > 0) report.first_step_overhead_ms.push_back(stalls.first_step_overhead_ms);
}

StallBreakdown measure_stall(const MetricsReport& report) {
  StallBreakdown out;
  out.median_step_ms = report.median_step_ms;
  const auto walls = step_walls(report.rows);

  for (const auto& r : report.rows) {
    if (r.phase == "retry" && (out.failure_step == 0 || r.step < out.failure_step)) {
      out.failure_step = r.step;
    }
    if (r.phase == "catchup" && r.step > 0 && (out.rejoin_step == 0 || r.step < out.rejoin_step)) {
      out.rejoin_step = r.step;
    }
  }
  if (out.failure_step > 0) {
    out.failure_stall_ms = std::max(0.0, walls.at(out.failure_step) - report.median_step_ms);
  }
  if (out.rejoin_step > 0) {
    for (const auto& r : report.rows) {
      if (r.step == out.rejoin_step && r.phase == "train") {
        out.rejoin_stall_ms = std::max(out.rejoin_stall_ms, r.wall_ms - report.median_step_ms);
      }
    }
    // Decision-to-commit time of the healthy leaders, less the joiner's fetch.
    std::vector<double> steady;
    double healthy = 0.0;
    double fetch = 0.0;
    for (const auto& a : report.attempts) {
      if (a.rank != 0) continue;
      if (trained(a) && a.attempt == 0 && a.step != out.rejoin_step) steady.push_back(a.step_ms);
      if (a.step == out.rejoin_step && trained(a)) healthy = std::max(healthy, a.step_ms);
    }
    for (const auto& a : report.attempts) {
      if (a.step == out.rejoin_step && a.phase == "catchup") fetch = std::max(fetch, a.fetch_ms);
    }
    out.first_step_overhead_ms = std::max(0.0, healthy - median(steady) - fetch);
  }
  return out;
}

AccuracyComparison accuracy_compare(const std::vector<CurvePoint>& a,
                                    const std::vector<CurvePoint>& b, double threshold) {
  AccuracyComparison out;
  if (a.empty() || b.empty()) {
    out.diverged = true;
    return out;
  }
  out.identical = a.size() == b.size() &&
                  std::equal(a.begin(), a.end(), b.begin(), [](const auto& x, const auto& y) {
                    return x.step == y.step && x.tokens == y.tokens && x.loss == y.loss &&
                           x.eval_loss == y.eval_loss;
                  });
  out.tokens = a.back().tokens;
  out.final_a = a.back().eval_loss;
  auto it = std::find_if(b.begin(), b.end(), [&](const auto& p) { return p.tokens >= out.tokens; });
  out.final_b = it == b.end() ? b.back().eval_loss : it->eval_loss;
  out.relative_diff = std::abs(out.final_a - out.final_b) / std::abs(out.final_a);
  out.diverged = !(out.relative_diff < threshold);
  return out;
}

double loss_stddev(const std::vector<CurvePoint>& curve, std::uint64_t from, std::uint64_t to) {
  std::vector<double> v;
  for (const auto& p : curve) {
    if (p.step >= from && p.step < to) v.push_back(p.eval_loss);
  }
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

void write_metrics_csv(const MetricsReport& r, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  out << "step,replica_id,phase,wall_ms,healthy_count,tokens_committed,loss,stall_ms,event\n";
  out << std::fixed;
  for (const auto& row : r.rows) {
    out << row.step << ',' << row.replica_id << ',' << row.phase << ',' << std::setprecision(3)
        << row.wall_ms << ',' << row.healthy_count << ',' << row.tokens_committed << ','
        << std::setprecision(9) << row.loss << ',' << std::setprecision(3) << row.stall_ms << ','
        << row.event << '\n';
  }
}

void write_curve_csv(const std::vector<CurvePoint>& curve, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  out << "step,tokens,loss,eval_loss\n" << std::setprecision(9);
  for (const auto& p : curve) {
    out << p.step << ',' << p.tokens << ',' << p.loss << ',' << p.eval_loss << '\n';
  }
}

std::vector<CurvePoint> read_curve_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::vector<CurvePoint> out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto f = split(line);
    if (f.size() != 4) continue;
    out.push_back({std::stoull(f[0]), std::stoull(f[1]), std::stod(f[2]), std::stod(f[3])});
  }
  return out;
}

std::string summary_json(const MetricsReport& r) {
  const auto stalls = measure_stall(r);
  json j;
  j["name"] = r.name;
  j["label"] = r.label;
  j["exit_code"] = r.exit_code;
  j["wall_s"] = r.wall_s;
  j["median_step_ms"] = r.median_step_ms;
  j["total_stall_ms"] = r.total_stall_ms;
  j["total_stall_steps"] = stalls.in_steps(r.total_stall_ms);
  j["failure_stall_ms"] = stalls.failure_stall_ms;
  j["rejoin_stall_ms"] = stalls.rejoin_stall_ms;
  j["first_step_overhead_ms"] = r.first_step_overhead_ms;
  j["effective_training_time"] = r.effective_training_time;
  j["final_loss"] = r.final_loss;
  j["final_eval_loss"] = r.final_eval_loss;
  j["tokens_total"] = r.tokens_total;
  j["decisions"] = r.decisions;
  j["rejected_reports"] = r.rejected_reports;
  json hashes = json::object();
  for (const auto& [rep, h] : r.final_hashes) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    hashes[std::to_string(rep)] = {{"next_step", r.final_steps.at(rep)}, {"hash", os.str()}};
  }
  j["final_state"] = hashes;
  j["events"] = r.events;
  j["violations"] = r.violations;
  return j.dump(2);
}

}  // namespace paft
