#include <catch2/catch_amalgamated.hpp>

#include <sys/types.h>
#include <sys/wait.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "taillab/orchestrator.hpp"
#include "taillab/scenario.hpp"

using namespace taillab;
using Catch::Matchers::ContainsSubstring;

namespace {

std::string out_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "taillab_scn" / name;
  std::filesystem::remove_all(dir);
  return dir.string();
}

const char* kThreePhase = R"(
# Three staggered clients against one server.
[scenario]
name = three_phase
repetitions = 1

[server]
id = 1
workload = fixed
mean_service_us = 1000
workers = 1
exec = sleep

[client]
id = 1
target = server:1
qps = 200
requests = 10000

[client]
id = 2
target = server:1
qps = 200
requests = 7000
start_delay_s = 15

[client]
id = 3
target = server:1
qps = 200
requests = 5000
start_delay_s = 35
)";

}  // namespace

TEST_CASE("a staggered three-client file parses to the right values") {
  ScenarioSpec s = parse_scenario_text(kThreePhase, "three_phase.scenario");
  CHECK(s.name == "three_phase");
  CHECK(s.repetitions == 1);
  CHECK(s.window_s == 1.0);        // default
  CHECK_FALSE(s.process_mode);     // default

  REQUIRE(s.servers.size() == 1);
  CHECK(s.servers[0].server_id == 1);
  CHECK(s.servers[0].workers == 1);
  CHECK(s.servers[0].workload.name == "fixed");
  CHECK(s.servers[0].workload.mean_service_us == 1000.0);
  CHECK(s.servers[0].workload.exec == ExecMode::kSleep);
  CHECK_FALSE(s.balancer.has_value());

  REQUIRE(s.clients.size() == 3);
  uint64_t budgets[] = {10000, 7000, 5000};
  double starts[] = {0.0, 15.0, 35.0};
  for (size_t i = 0; i < 3; i++) {
    CHECK(s.clients[i].spec.client_id == i + 1);
    CHECK(s.clients[i].target == "server:1");
    CHECK(s.clients[i].spec.total_requests == budgets[i]);
    CHECK(s.clients[i].spec.start_delay_s == starts[i]);
    REQUIRE(s.clients[i].spec.schedule.intervals.size() == 1);
    CHECK(s.clients[i].spec.schedule.intervals[0].qps == 200.0);
  }
}

TEST_CASE("defaults apply when the scenario file leaves them out") {
  ScenarioSpec s = parse_scenario_text(R"(
[scenario]
name = d
[server]
id = 1
[client]
id = 1
target = server:1
qps = 50
requests = 10
)",
                                       "d.scenario");
  CHECK(s.repetitions == 13);
  CHECK(s.window_s == 1.0);
  CHECK_FALSE(s.process_mode);
  CHECK(s.servers[0].workers == 1);
  CHECK(s.servers[0].queue_capacity == 0);
  CHECK(s.servers[0].workload.name == "fixed");
  CHECK(s.clients[0].spec.sender_threads == 1);
}

TEST_CASE("schedules parse as offset:qps lists") {
  ScenarioSpec s = parse_scenario_text(R"(
[scenario]
name = sched
[server]
id = 1
[client]
id = 1
target = server:1
schedule = 0:100, 10:300, 20:800
requests = 100
)",
                                       "s.scenario");
  const auto& iv = s.clients[0].spec.schedule.intervals;
  REQUIRE(iv.size() == 3);
  CHECK(iv[0].start_offset_s == 0.0);
  CHECK(iv[0].qps == 100.0);
  CHECK(iv[1].start_offset_s == 10.0);
  CHECK(iv[1].qps == 300.0);
  CHECK(iv[2].start_offset_s == 20.0);
  CHECK(iv[2].qps == 800.0);
}

TEST_CASE("scenario file errors carry the file and line") {
  auto expect_parse_error = [](const std::string& text,
                               const std::string& needle) {
    REQUIRE_THROWS_WITH(parse_scenario_text(text, "bad.scenario"),
                        ContainsSubstring(needle));
  };

  // Dangling server reference in a client target.
  expect_parse_error(R"(
[scenario]
name = x
[server]
id = 1
[client]
id = 1
target = server:9
qps = 10
requests = 1
)",
                     "unknown server 9");

  // Unknown key, reported with its line number.
  try {
    parse_scenario_text(R"(
[scenario]
name = x
[server]
id = 1
colour = blue
[client]
id = 1
target = server:1
qps = 10
requests = 1
)",
                        "bad.scenario");
    FAIL("expected a parse error");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    CHECK_THAT(msg, ContainsSubstring("colour"));
    CHECK_THAT(msg, ContainsSubstring("bad.scenario"));
  }

  expect_parse_error("[scenario]\nname = x\n[mystery]\nkey = 1\n", "mystery");
  expect_parse_error(R"(
[scenario]
name = x
[server]
id = 1
[client]
id = 1
target = server:1
qps = 10
requests = 0
)",
                     "requests");

  // qps and schedule are mutually exclusive, and one is required.
  expect_parse_error(R"(
[scenario]
name = x
[server]
id = 1
[client]
id = 1
target = server:1
qps = 10
schedule = 0:10
requests = 5
)",
                     "schedule");
  expect_parse_error(R"(
[scenario]
name = x
[server]
id = 1
[client]
id = 1
target = server:1
requests = 5
)",
                     "qps");

  // Duplicate component ids.
  expect_parse_error(R"(
[scenario]
name = x
[server]
id = 1
[server]
id = 1
[client]
id = 1
target = server:1
qps = 10
requests = 1
)",
                     "duplicate");

  // A scenario needs at least one server and one client.
  expect_parse_error("[scenario]\nname = x\n[server]\nid = 1\n", "client");

  // The balancer cannot be its own backend.
  expect_parse_error(R"(
[scenario]
name = x
[server]
id = 1
[balancer]
backends = balancer
[client]
id = 1
target = balancer
qps = 10
requests = 1
)",
                     "balancer");
}

TEST_CASE("sweep files demand an increasing qps grid") {
  SweepSpec ok = parse_sweep_text(R"(
[scenario]
name = sw
[sweep]
qps = 100, 200, 400
duration_s = 2
[server]
id = 1
[client]
id = 1
target = server:1
)",
                                  "ok.sweep");
  CHECK(ok.qps_values == std::vector<double>{100.0, 200.0, 400.0});
  CHECK(ok.duration_s == 2.0);
  CHECK(ok.base.clients.size() == 1);

  REQUIRE_THROWS_WITH(parse_sweep_text(R"(
[scenario]
name = sw
[sweep]
qps = 200, 100
duration_s = 2
[server]
id = 1
[client]
id = 1
target = server:1
)",
                                       "bad.sweep"),
                      ContainsSubstring("increasing"));

  // Per-client rates and budgets are owned by the sweep.
  REQUIRE_THROWS_WITH(parse_sweep_text(R"(
[scenario]
name = sw
[sweep]
qps = 100
duration_s = 2
[server]
id = 1
[client]
id = 1
target = server:1
qps = 50
)",
                                       "bad2.sweep"),
                      ContainsSubstring("sweep"));
}

TEST_CASE("a thread-mode run produces logs, summaries, and a manifest") {
  std::string dir = out_dir("thread_run");
  ScenarioSpec s = parse_scenario_text(R"(
[scenario]
name = tiny
repetitions = 1
[server]
id = 1
workload = fixed
mean_service_us = 200
[client]
id = 1
target = server:1
qps = 400
requests = 120
[client]
id = 2
target = server:1
qps = 400
requests = 80
start_delay_s = 0.3
)",
                                       "tiny.scenario");
  RunOptions opt;
  opt.out_dir = dir;
  ScenarioReport rep = run_scenario(s, opt);

  REQUIRE(rep.reps.size() == 1);
  const RepOutcome& r = rep.reps[0];
  INFO(r.error);
  REQUIRE(rep.success);
  REQUIRE(r.clients.size() == 2);
  CHECK(r.clients[0].completed == 120);
  CHECK(r.clients[1].completed == 80);
  CHECK_FALSE(r.clients[0].aborted);
  CHECK(r.clients[0].lifetime_s > 0.0);

  // Files land where the manifest says.
  CHECK(std::filesystem::exists(rep.manifest_path));
  CHECK(std::filesystem::exists(r.summary_path));
  for (const auto& c : r.clients) {
    CHECK(std::filesystem::exists(c.log_path));
    CHECK(std::filesystem::exists(c.rates_path));
    REQUIRE(read_client_log(c.log_path).size() == c.budget);
  }

  // The summary has windowed per-client scopes plus pooled totals.
  std::set<std::string> scopes;
  for (const auto& row : r.summary) scopes.insert(row.scope);
  CHECK(scopes.count("client_1.total") == 1);
  CHECK(scopes.count("client_2.total") == 1);
  CHECK(scopes.count("run.total") == 1);
  CHECK(scopes.count("client_1") == 1);

  // Windowed client_1 rows partition its total.
  uint64_t windowed = 0, total = 0;
  for (const auto& row : r.summary) {
    if (row.scope == "client_1") windowed += row.n;
    if (row.scope == "client_1.total") total = row.n;
  }
  CHECK(windowed == total);
  CHECK(total == 120);
}

TEST_CASE("repetitions run to distinct directories with distinct seeds") {
  std::string dir = out_dir("reps");
  ScenarioSpec s = parse_scenario_text(R"(
[scenario]
name = reps
repetitions = 2
[server]
id = 1
workload = fixed
mean_service_us = 100
[client]
id = 1
target = server:1
qps = 500
requests = 60
)",
                                       "reps.scenario");
  RunOptions opt;
  opt.out_dir = dir;
  ScenarioReport rep = run_scenario(s, opt);
  REQUIRE(rep.success);
  REQUIRE(rep.reps.size() == 2);
  CHECK(rep.reps[0].dir != rep.reps[1].dir);
  CHECK(std::filesystem::exists(rep.reps[0].dir + "/summary.csv"));
  CHECK(std::filesystem::exists(rep.reps[1].dir + "/summary.csv"));

  // Different reps must see different arrival draws (reseeded), while a
  // rerun of the same scenario reproduces rep 0 exactly.
  auto log0 = read_client_log(rep.reps[0].clients[0].log_path);
  auto log1 = read_client_log(rep.reps[1].clients[0].log_path);
  REQUIRE(log0.size() == log1.size());
  bool any_gap_differs = false;
  for (size_t i = 1; i < log0.size(); i++) {
    uint64_t g0 = log0[i].send_ns - log0[0].send_ns;
    uint64_t g1 = log1[i].send_ns - log1[0].send_ns;
    if (g0 / 1'000'000 != g1 / 1'000'000) any_gap_differs = true;
  }
  CHECK(any_gap_differs);
}

TEST_CASE("a process-mode run works and leaves no orphan processes") {
  std::string dir = out_dir("proc_run");
  ScenarioSpec s = parse_scenario_text(R"(
[scenario]
name = procs
repetitions = 1
mode = process
[server]
id = 1
workload = fixed
mean_service_us = 200
[balancer]
policy = round_robin
[client]
id = 1
target = balancer
qps = 300
requests = 90
)",
                                       "procs.scenario");
  RunOptions opt;
  opt.out_dir = dir;
  ScenarioReport rep = run_scenario(s, opt);

  REQUIRE(rep.reps.size() == 1);
  INFO(rep.reps[0].error);
  REQUIRE(rep.success);
  CHECK(rep.reps[0].clients[0].completed == 90);
  REQUIRE(read_client_log(rep.reps[0].clients[0].log_path).size() == 90);
  CHECK_FALSE(rep.reps[0].balancer_address.empty());

  // Every spawned child is reaped: waitpid finds nothing left.
  int status = 0;
  pid_t w = ::waitpid(-1, &status, WNOHANG);
  CHECK((w == 0 || (w == -1 && errno == ECHILD)));
}

TEST_CASE("a sweep aggregates per-point cells into a curve") {
  std::string dir = out_dir("sweep");
  SweepSpec sw = parse_sweep_text(R"(
[scenario]
name = mini
repetitions = 2
[sweep]
qps = 100, 200
duration_s = 1
[server]
id = 1
workload = fixed
mean_service_us = 100
[client]
id = 1
target = server:1
)",
                                  "mini.sweep");
  RunOptions opt;
  opt.out_dir = dir;
  SweepReport rep = run_sweep(sw, opt);
  for (const auto& f : rep.failures) INFO(f);
  REQUIRE(rep.success);

  // cells: qps x rep x 3 metrics.
  CHECK(rep.cells.size() == 2 * 2 * 3);
  std::set<std::string> metrics;
  std::set<double> qps_seen;
  for (const auto& c : rep.cells) {
    metrics.insert(c.metric);
    qps_seen.insert(c.qps);
    CHECK(c.value >= 0.0);
  }
  CHECK(metrics == std::set<std::string>{"mean", "p95", "p99"});
  CHECK(qps_seen == std::set<double>{100.0, 200.0});

  // curve: one row per (qps, metric), CI present with 2 reps.
  CHECK(rep.curve.size() == 2 * 3);
  for (const auto& row : rep.curve) {
    CHECK(row.ci_low.has_value());
    CHECK(row.ci_high.has_value());
    CHECK(*row.ci_low <= row.mean);
    CHECK(row.mean <= *row.ci_high);
  }
  CHECK(std::filesystem::exists(rep.cells_path));
  CHECK(std::filesystem::exists(rep.curve_path));
  CHECK(rep.boxplot_path.empty());  // needs >= 5 reps

  // Re-reading the published curve round-trips.
  auto curve = read_curve_csv(rep.curve_path);
  REQUIRE(curve.size() == rep.curve.size());

  // A single-repetition sweep warns that intervals need >= 2 reps.
  std::string dir1 = out_dir("sweep1");
  RunOptions opt1;
  opt1.out_dir = dir1;
  opt1.repetitions = 1;
  SweepReport rep1 = run_sweep(sw, opt1);
  REQUIRE(rep1.success);
  bool warned = false;
  for (const auto& w : rep1.warnings) {
    if (w.find("repetition") != std::string::npos) warned = true;
  }
  CHECK(warned);
  for (const auto& row : rep1.curve) CHECK_FALSE(row.ci_low.has_value());
}

TEST_CASE("comparing a curve with itself accepts the null hypothesis") {
  std::string dir = out_dir("cmp");
  std::filesystem::create_directories(dir);
  std::vector<CurveRow> curve;
  for (double q : {100.0, 200.0, 400.0}) {
    for (const char* m : {"mean", "p95", "p99"}) {
      CurveRow r;
      r.qps = q;
      r.metric = m;
      r.mean = q * 0.01 + (m[0] == 'p' ? 1.0 : 0.0);
      curve.push_back(r);
    }
  }
  write_curve_csv(dir + "/curve.csv", curve);

  auto results = compare_runs(dir, dir);
  REQUIRE(results.size() == 3);
  for (const auto& [metric, t] : results) {
    CHECK(t.t_statistic == 0.0);
    CHECK(t.p_value == 1.0);
    CHECK_FALSE(t.reject_at_0_05);
  }

  // Mismatched qps grids are a hard error naming the odd point.
  std::string dir2 = out_dir("cmp2");
  std::filesystem::create_directories(dir2);
  for (auto& r : curve) r.qps += (r.qps == 400.0 ? 100.0 : 0.0);
  write_curve_csv(dir2 + "/curve.csv", curve);
  REQUIRE_THROWS_WITH(compare_runs(dir, dir2), ContainsSubstring("500"));
}

TEST_CASE("standalone statistics pool logs under a shared epoch") {
  std::string dir = out_dir("stats_cli");
  ScenarioSpec s = parse_scenario_text(R"(
[scenario]
name = st
repetitions = 1
[server]
id = 1
workload = fixed
mean_service_us = 100
[client]
id = 1
target = server:1
qps = 300
requests = 60
[client]
id = 2
target = server:1
qps = 300
requests = 60
)",
                                       "st.scenario");
  RunOptions opt;
  opt.out_dir = dir;
  ScenarioReport rep = run_scenario(s, opt);
  REQUIRE(rep.success);

  std::vector<std::string> logs;
  for (const auto& c : rep.reps[0].clients) logs.push_back(c.log_path);
  auto rows = stats_over_logs(logs, 1.0);
  REQUIRE_FALSE(rows.empty());

  std::set<std::string> scopes;
  uint64_t pooled_n = 0;
  for (const auto& r : rows) {
    scopes.insert(r.scope);
    if (r.scope == "all.total") pooled_n = r.n;
  }
  CHECK(scopes.count("client_1.total") == 1);
  CHECK(scopes.count("client_2.total") == 1);
  CHECK(pooled_n == 120);

  REQUIRE_THROWS_AS(stats_over_logs({}, 1.0), ConfigError);
}
