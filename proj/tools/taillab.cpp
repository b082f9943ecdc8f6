// taillab: multi-client / multi-server tail-latency benchmarking harness.
//
// Subcommands:
//   run <scenario>         execute a scenario file, write logs + summaries
//   sweep <sweep-file>     run a qps sweep, write cells/curve CSVs
//   compare <a> <b>        Welch's t-test between two sweep reports
//   stats <log...>         summarize client logs into windowed CSV rows
//   server/client/balancer single components (used for process-mode runs)

#include <csignal>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "taillab/orchestrator.hpp"

namespace {

using namespace taillab;

int cmd_run(const std::string& scenario_path, RunOptions opt) {
  ScenarioSpec scenario = parse_scenario(scenario_path);
  ScenarioReport report = run_scenario(scenario, opt);
  for (size_t r = 0; r < report.reps.size(); r++) {
    const auto& rep = report.reps[r];
    std::printf("rep %zu: %s", r, rep.success ? "ok" : "FAILED");
    if (!rep.error.empty()) std::printf(" (%s)", rep.error.c_str());
    std::printf("\n");
    for (const auto& c : rep.clients) {
      std::printf("  client %llu: %llu/%llu responses, lifetime %.2f s\n",
                  static_cast<unsigned long long>(c.client_id),
                  static_cast<unsigned long long>(c.completed),
                  static_cast<unsigned long long>(c.budget), c.lifetime_s);
    }
  }
  std::printf("manifest: %s\n", report.manifest_path.c_str());
  return report.success ? 0 : 1;
}

int cmd_sweep(const std::string& sweep_path, RunOptions opt) {
  SweepSpec sweep = parse_sweep(sweep_path);
  SweepReport report = run_sweep(sweep, opt);
  for (const auto& w : report.warnings) {
    std::printf("warning: %s\n", w.c_str());
  }
  for (const auto& f : report.failures) {
    std::printf("failed cell: %s\n", f.c_str());
  }
  std::printf("cells: %s\ncurve: %s\nmanifest: %s\n", report.cells_path.c_str(),
              report.curve_path.c_str(), report.manifest_path.c_str());
  return report.success ? 0 : 1;
}

int cmd_compare(const std::string& report_a, const std::string& report_b,
                const std::string& out_dir) {
  auto results = compare_runs(report_a, report_b);
  for (const auto& [metric, t] : results) {
    std::printf("%s: %.4f / %.4f%s\n", metric.c_str(), t.t_statistic,
                t.p_value, t.reject_at_0_05 ? "  (reject at 0.05)" : "");
  }
  std::filesystem::create_directories(out_dir);
  std::string path = out_dir + "/ttest.csv";
  write_ttest_csv(path, results);
  std::printf("wrote %s\n", path.c_str());
  return 0;
}

int cmd_stats(const std::vector<std::string>& logs, double window_s,
              const std::string& out_dir) {
  auto rows = stats_over_logs(logs, window_s);
  std::filesystem::create_directories(out_dir);
  std::string path = out_dir + "/summary.csv";
  write_summary_csv(path, rows);
  std::printf("wrote %s (%zu rows)\n", path.c_str(), rows.size());
  return 0;
}

/// Blocks the calling thread until SIGINT/SIGTERM. The mask must be set
/// before component threads start so they inherit it and the signal is
/// only ever delivered here.
sigset_t block_stop_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  return set;
}

int cmd_server(const ServerSpec& spec) {
  sigset_t set = block_stop_signals();
  Server server(spec);
  server.start();
  std::printf("READY %s\n", server.bound_address().str().c_str());
  std::fflush(stdout);
  int sig = 0;
  sigwait(&set, &sig);
  server.stop();
  return 0;
}

int cmd_balancer(const BalancerSpec& spec) {
  sigset_t set = block_stop_signals();
  Balancer balancer(spec);
  balancer.start();
  std::printf("READY %s\n", balancer.bound_address().c_str());
  std::fflush(stdout);
  int sig = 0;
  sigwait(&set, &sig);
  balancer.stop();
  return 0;
}

int cmd_client(ClientSpec spec, const std::string& rates_path) {
  Client client(std::move(spec));
  ClientResult result = client.run();
  if (!rates_path.empty()) write_rates_csv(rates_path, result.conformance);
  bool complete = !result.transport_error &&
                  result.entries.size() == client.spec().total_requests;
  if (complete) {
    std::printf("DONE %zu\n", result.entries.size());
    return 0;
  }
  std::printf("ERROR %s\n",
              result.error.empty() ? "incomplete" : result.error.c_str());
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-client / multi-server tail-latency benchmarking harness"};
  app.require_subcommand(1);

  std::string scenario_path, sweep_path, report_a, report_b;
  std::vector<std::string> stat_logs;
  taillab::RunOptions opt;
  uint64_t seed_flag = 0;
  uint64_t reps_flag = 0;
  double window_s = 1.0;

  auto* run_cmd = app.add_subcommand("run", "execute a scenario file");
  run_cmd->add_option("scenario", scenario_path, "scenario file")->required();
  run_cmd->add_option("--out", opt.out_dir, "output directory");
  auto* run_seed = run_cmd->add_option("--seed", seed_flag, "seed override");
  auto* run_reps =
      run_cmd->add_option("--repetitions", reps_flag, "repetition override");
  run_cmd->add_flag("--exclude-warmup", opt.exclude_warmup,
                    "drop each client's first second of samples");

  auto* sweep_cmd = app.add_subcommand("sweep", "run a qps sweep");
  sweep_cmd->add_option("sweep", sweep_path, "sweep file")->required();
  sweep_cmd->add_option("--out", opt.out_dir, "output directory");
  auto* sweep_seed = sweep_cmd->add_option("--seed", seed_flag, "seed override");
  auto* sweep_reps =
      sweep_cmd->add_option("--repetitions", reps_flag, "repetition override");

  std::string compare_out = ".";
  auto* compare_cmd =
      app.add_subcommand("compare", "Welch's t-test between two sweep reports");
  compare_cmd->add_option("report_a", report_a, "first report dir or curve csv")
      ->required();
  compare_cmd->add_option("report_b", report_b, "second report dir or curve csv")
      ->required();
  compare_cmd->add_option("--out", compare_out, "output directory");

  std::string stats_out = ".";
  auto* stats_cmd = app.add_subcommand("stats", "summarize client logs");
  stats_cmd->add_option("logs", stat_logs, "client log csv files")->required();
  stats_cmd->add_option("--window-s", window_s, "summary window length");
  stats_cmd->add_option("--out", stats_out, "output directory");

  taillab::ServerSpec server_spec;
  std::string exec_mode = "spin";
  auto* server_cmd = app.add_subcommand("server", "run one server");
  server_cmd->add_option("--id", server_spec.server_id, "server id");
  server_cmd->add_option("--listen", server_spec.listen_address, "listen address");
  server_cmd->add_option("--workers", server_spec.workers, "worker threads");
  server_cmd->add_option("--queue-capacity", server_spec.queue_capacity,
                         "max queued requests (0 = unbounded)");
  server_cmd->add_option("--workload", server_spec.workload.name,
                         "fixed|exponential|lognormal|zipf-items");
  server_cmd->add_option("--mean-service-us", server_spec.workload.mean_service_us,
                         "mean service time in microseconds");
  server_cmd->add_option("--sigma", server_spec.workload.sigma,
                         "lognormal shape parameter");
  server_cmd->add_option("--items", server_spec.workload.item_count,
                         "zipf-items catalog size");
  server_cmd->add_option("--zipf-exponent", server_spec.workload.zipf_exponent,
                         "zipf popularity exponent");
  server_cmd->add_option("--seed", server_spec.workload.seed, "service rng seed");
  server_cmd->add_option("--exec", exec_mode, "spin|sleep service execution");
  server_cmd->add_option("--log", server_spec.log_path, "event log csv path");

  taillab::ClientSpec client_spec;
  std::string schedule_value, rates_path;
  auto* client_cmd = app.add_subcommand("client", "run one client");
  client_cmd->add_option("--id", client_spec.client_id, "client id");
  client_cmd->add_option("--target", client_spec.target_address,
                         "server or balancer address")
      ->required();
  client_cmd->add_option("--requests", client_spec.total_requests,
                         "total request budget");
  client_cmd->add_option("--schedule", schedule_value,
                         "offset_s:qps[,offset_s:qps...]")
      ->required();
  client_cmd->add_option("--senders", client_spec.sender_threads,
                         "sender threads");
  client_cmd->add_option("--seed", client_spec.seed, "arrival rng seed");
  client_cmd->add_option("--response-timeout-s", client_spec.response_timeout_s,
                         "abort after this long without a response");
  client_cmd->add_option("--log", client_spec.log_path, "per-request log csv");
  client_cmd->add_option("--rates", rates_path, "rate conformance csv");

  taillab::BalancerSpec balancer_spec;
  std::string declared_rates_value;
  auto* balancer_cmd = app.add_subcommand("balancer", "run the balancer");
  balancer_cmd->add_option("--listen", balancer_spec.listen_address,
                           "listen address");
  balancer_cmd->add_option("--backend", balancer_spec.backends,
                           "backend address (repeatable)")
      ->required();
  balancer_cmd->add_option("--policy", balancer_spec.policy,
                           "round_robin|load_aware");
  balancer_cmd->add_option("--declared-rates", declared_rates_value,
                           "client_id:qps[,client_id:qps...]");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) {
      if (*run_seed) opt.seed = seed_flag;
      if (*run_reps) opt.repetitions = reps_flag;
      return cmd_run(scenario_path, opt);
    }
    if (sweep_cmd->parsed()) {
      if (*sweep_seed) opt.seed = seed_flag;
      if (*sweep_reps) opt.repetitions = reps_flag;
      return cmd_sweep(sweep_path, opt);
    }
    if (compare_cmd->parsed()) return cmd_compare(report_a, report_b, compare_out);
    if (stats_cmd->parsed()) return cmd_stats(stat_logs, window_s, stats_out);
    if (server_cmd->parsed()) {
      server_spec.workload.exec =
          taillab::detail::parse_exec_mode(exec_mode, "--exec");
      return cmd_server(server_spec);
    }
    if (client_cmd->parsed()) {
      client_spec.schedule =
          taillab::detail::parse_schedule_value(schedule_value, "--schedule");
      return cmd_client(std::move(client_spec), rates_path);
    }
    if (balancer_cmd->parsed()) {
      if (!declared_rates_value.empty()) {
        balancer_spec.declared_rates = taillab::detail::parse_declared_rates(
            declared_rates_value, "--declared-rates");
      }
      return cmd_balancer(balancer_spec);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
