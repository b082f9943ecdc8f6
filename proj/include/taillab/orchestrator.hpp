#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <signal.h>
#include <sys/prctl.h>
#include <sys/wait.h>
#include <unistd.h>

#include "taillab/balancer.hpp"
#include "taillab/client.hpp"
#include "taillab/csv.hpp"
#include "taillab/scenario.hpp"
#include "taillab/server.hpp"
#include "taillab/stats.hpp"

namespace taillab {

/// client_id used by readiness probes; kept out of real-client id space so
/// probe traffic is distinguishable in server event logs.
inline constexpr uint64_t kProbeClientId = 0xffffffffffffffffull;

struct RunOptions {
  std::string out_dir = "out";
  std::optional<uint64_t> seed;         // overrides per-component seeds
  std::optional<uint64_t> repetitions;  // overrides the scenario's value
  bool exclude_warmup = false;  // drop each client's first second of samples
};

// ---------------------------------------------------------------------------
// Child process management (process-mode runs)
// ---------------------------------------------------------------------------

/// Resolves the binary to exec for child components: the test harness
/// points TAILLAB_BIN at the CLI; the CLI itself re-execs its own image.
inline std::string self_exe_path() {
  if (const char* env = ::getenv("TAILLAB_BIN")) return env;
  char buf[4096];
  ssize_t n = ::readlink("/proc/self/exe", buf, sizeof(buf) - 1);
  if (n <= 0) throw ConfigError("cannot resolve own executable path");
  buf[n] = '\0';
  return buf;
}

/// A spawned component with its stdout piped back. The destructor
/// guarantees the child is gone; the child additionally carries a
/// parent-death signal so a crashed orchestrator cannot leak processes.
class ChildProc {
 public:
  ChildProc() = default;
  ChildProc(const ChildProc&) = delete;
  ChildProc& operator=(const ChildProc&) = delete;
  ChildProc(ChildProc&& other) noexcept { *this = std::move(other); }
  ChildProc& operator=(ChildProc&& other) noexcept {
    if (this != &other) {
      dispose();
      pid_ = other.pid_;
      out_fd_ = other.out_fd_;
      buf_ = std::move(other.buf_);
      waited_ = other.waited_;
      status_ = other.status_;
      other.pid_ = -1;
      other.out_fd_ = -1;
      other.waited_ = true;
    }
    return *this;
  }
  ~ChildProc() { dispose(); }

  static ChildProc spawn(const std::vector<std::string>& argv) {
    int pipe_fds[2];
    if (::pipe(pipe_fds) != 0) throw ConfigError("pipe failed");
    pid_t pid = ::fork();
    if (pid < 0) {
      ::close(pipe_fds[0]);
      ::close(pipe_fds[1]);
      throw ConfigError("fork failed");
    }
    if (pid == 0) {
      ::prctl(PR_SET_PDEATHSIG, SIGKILL);
      ::dup2(pipe_fds[1], STDOUT_FILENO);
      ::close(pipe_fds[0]);
      ::close(pipe_fds[1]);
      std::vector<char*> cargv;
      cargv.reserve(argv.size() + 1);
      for (const auto& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
      cargv.push_back(nullptr);
      ::execv(cargv[0], cargv.data());
      ::_exit(127);
    }
    ::close(pipe_fds[1]);
    ChildProc child;
    child.pid_ = pid;
    child.out_fd_ = pipe_fds[0];
    return child;
  }

  pid_t pid() const { return pid_; }

  /// Next stdout line within the deadline; nullopt on timeout or EOF.
  std::optional<std::string> read_line(int timeout_ms) {
    uint64_t deadline = now_ns() + static_cast<uint64_t>(timeout_ms) * 1'000'000ull;
    for (;;) {
      size_t nl = buf_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buf_.substr(0, nl);
        buf_.erase(0, nl + 1);
        return line;
      }
      uint64_t now = now_ns();
      if (now >= deadline) return std::nullopt;
      pollfd pfd{out_fd_, POLLIN, 0};
      int rc = ::poll(&pfd, 1, static_cast<int>((deadline - now) / 1'000'000ull));
      if (rc <= 0) continue;
      char chunk[4096];
      ssize_t n = ::read(out_fd_, chunk, sizeof(chunk));
      if (n <= 0) return std::nullopt;  // child closed stdout
      buf_.append(chunk, static_cast<size_t>(n));
    }
  }

  /// Blocks until exit. Returns the exit code, or 128+signal.
  int wait() {
    if (waited_) return status_;
    int st = 0;
    while (::waitpid(pid_, &st, 0) < 0 && errno == EINTR) {
    }
    waited_ = true;
    status_ = WIFEXITED(st) ? WEXITSTATUS(st)
                            : (WIFSIGNALED(st) ? 128 + WTERMSIG(st) : -1);
    return status_;
  }

  /// Polite stop: SIGTERM, 5 s grace, then SIGKILL.
  void terminate() {
    if (pid_ < 0 || waited_) return;
    ::kill(pid_, SIGTERM);
    uint64_t deadline = now_ns() + 5'000'000'000ull;
    int st = 0;
    for (;;) {
      pid_t r = ::waitpid(pid_, &st, WNOHANG);
      if (r == pid_) {
        waited_ = true;
        status_ = WIFEXITED(st) ? WEXITSTATUS(st)
                                : (WIFSIGNALED(st) ? 128 + WTERMSIG(st) : -1);
        return;
      }
      if (r < 0 && errno != EINTR) break;
      if (now_ns() >= deadline) break;
      sleep_for_ns(20'000'000);
    }
    ::kill(pid_, SIGKILL);
    wait();
  }

 private:
  void dispose() {
    terminate();
    if (out_fd_ >= 0) {
      ::close(out_fd_);
      out_fd_ = -1;
    }
  }

  pid_t pid_ = -1;
  int out_fd_ = -1;
  std::string buf_;
  bool waited_ = false;
  int status_ = -1;
};

// ---------------------------------------------------------------------------
// Run outcome types
// ---------------------------------------------------------------------------

struct ClientOutcome {
  uint64_t client_id = 0;
  std::string target_address;
  std::string log_path;
  std::string rates_path;
  uint64_t budget = 0;
  uint64_t completed = 0;
  bool aborted = false;
  std::string error;
  double lifetime_s = 0;  // launch instant -> last response
  std::vector<IntervalRate> conformance;
};

struct RepOutcome {
  bool success = false;
  std::string error;
  std::string dir;
  uint64_t run_epoch_ns = 0;
  std::vector<std::pair<uint32_t, std::string>> server_addresses;
  std::string balancer_address;
  std::vector<std::pair<uint64_t, size_t>> assignments;  // thread mode only
  std::vector<ClientOutcome> clients;
  std::string summary_path;
  std::vector<SummaryRow> summary;
  std::map<uint64_t, std::vector<LatencySample>> samples;  // by client_id
};

struct ScenarioReport {
  bool success = false;
  std::string out_dir;
  std::string manifest_path;
  std::vector<RepOutcome> reps;
};

struct SweepReport {
  bool success = false;
  std::string out_dir;
  std::string cells_path;
  std::string curve_path;
  std::string boxplot_path;  // empty when repetitions < 5
  std::string manifest_path;
  std::vector<CellRow> cells;
  std::vector<CurveRow> curve;
  std::vector<std::string> failures;  // "qps=Q rep=R: why"
  std::vector<std::string> warnings;
};

namespace detail {

/// Repetition 0 runs with the configured seed so single runs are exactly
/// reproducible from the file; later repetitions derive fresh streams.
inline uint64_t rep_seed(uint64_t base, uint64_t rep) {
  return rep == 0 ? base : mix_seed(base, rep);
}

inline std::string resolve_target(
    const std::string& token,
    const std::map<uint32_t, std::string>& server_addresses,
    const std::string& balancer_address) {
  if (token == "balancer") return balancer_address;
  if (token.rfind("server:", 0) == 0) {
    uint32_t id = static_cast<uint32_t>(std::stoull(token.substr(7)));
    return server_addresses.at(id);
  }
  return token;
}

/// Serializations for handing specs to child processes on argv.
inline std::string schedule_to_string(const QpsSchedule& s) {
  std::string out;
  for (const auto& iv : s.intervals) {
    if (!out.empty()) out += ',';
    out += fmt_double(iv.start_offset_s) + ":" + fmt_double(iv.qps);
  }
  return out;
}

inline std::string declared_rates_to_string(
    const std::map<uint64_t, double>& rates) {
  std::string out;
  for (const auto& [id, qps] : rates) {
    if (!out.empty()) out += ',';
    out += std::to_string(id) + ":" + fmt_double(qps);
  }
  return out;
}

/// Dials until the listener answers a throwaway request end to end.
/// Probes talk to servers directly so they never occupy a balancer
/// arrival slot.
inline void ping_server(const std::string& address) {
  TcpConn conn;
  uint64_t deadline = now_ns() + 10'000'000'000ull;
  for (;;) {
    try {
      conn = TcpConn::dial(Addr::parse(address));
      break;
    } catch (const NetError&) {
      if (now_ns() >= deadline) {
        throw NetError("server at " + address + " not accepting connections");
      }
      sleep_for_ns(50'000'000);
    }
  }
  conn.set_nodelay();
  conn.write_all(encode(make_frame(FrameKind::kClientHello, 0, kProbeClientId)));
  conn.write_all(encode(make_frame(FrameKind::kRequest, 0, kProbeClientId)));
  FrameReader reader;
  std::vector<uint8_t> buf(4096);
  for (;;) {
    if (now_ns() >= deadline) {
      throw NetError("server at " + address + " did not answer readiness probe");
    }
    pollfd pfd{conn.fd(), POLLIN, 0};
    int rc = ::poll(&pfd, 1, 200);
    if (rc <= 0) continue;
    ssize_t n = conn.read_some(buf);
    if (n == 0) throw NetError("server at " + address + " closed the probe");
    if (n < 0) continue;
    reader.feed(std::span<const uint8_t>(buf.data(), static_cast<size_t>(n)));
    DecodeResult r = reader.next();
    if (r.status == DecodeStatus::kIncomplete) continue;
    if (r.status != DecodeStatus::kOk || r.frame.kind != FrameKind::kResponse) {
      throw NetError("bad readiness reply from " + address);
    }
    break;
  }
  conn.write_all(encode(make_frame(FrameKind::kClientBye, 0, kProbeClientId)));
  conn.close();
}

/// Appends windowed rows (scope) plus one whole-range row (scope.total).
inline void append_scope_summaries(std::vector<SummaryRow>& out,
                                   const std::string& scope,
                                   std::span<const LatencySample> samples,
                                   double window_s, bool with_windows) {
  if (samples.empty()) return;
  double max_off = 0;
  for (const auto& s : samples) max_off = std::max(max_off, s.completion_offset_s);
  if (with_windows) {
    auto k_end = static_cast<uint64_t>(std::ceil(max_off / window_s));
    if (k_end == 0) k_end = 1;
    for (uint64_t k = 0; k < k_end; k++) {
      Window w{static_cast<double>(k) * window_s,
               static_cast<double>(k + 1) * window_s};
      auto summary = summarize(samples, w);
      if (!summary) continue;  // empty window: no row
      out.push_back({scope, w.start_s, w.end_s, summary->n, summary->mean_ms,
                     summary->p95_ms, summary->p99_ms});
    }
  }
  auto total = summarize(samples);
  out.push_back({scope + ".total", 0, max_off, total->n, total->mean_ms,
                 total->p95_ms, total->p99_ms});
}

inline std::string file_stem(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Single scenario execution
// ---------------------------------------------------------------------------

namespace detail {

struct PreparedClient {
  ClientSpec spec;  // target resolved, paths and seed filled
  std::string target_token;
};

/// Shared post-run accounting: reads logs back (both modes produce the
/// same files), derives samples, summaries, conformance and lifetimes.
inline void finalize_rep(const ScenarioSpec& scenario, RepOutcome& rep,
                         const RunOptions& opt, double window_s) {
  std::vector<SummaryRow> summary_rows;
  std::vector<LatencySample> pooled;
  for (auto& outcome : rep.clients) {
    std::vector<ClientLogRow> rows;
    try {
      rows = read_client_log(outcome.log_path);
    } catch (const ConfigError&) {
      // missing/empty log: aborted client, keep zero rows
    }
    outcome.completed = rows.size();
    const ScenarioClient* sc = nullptr;
    for (const auto& c : scenario.clients) {
      if (c.spec.client_id == outcome.client_id) sc = &c;
    }
    double delay_s = sc ? sc->spec.start_delay_s : 0;
    uint64_t launch_ns =
        rep.run_epoch_ns + static_cast<uint64_t>(delay_s * 1e9);
    uint64_t last_recv = 0;
    for (const auto& r : rows) last_recv = std::max(last_recv, r.recv_ns);
    outcome.lifetime_s =
        last_recv > launch_ns ? (last_recv - launch_ns) / 1e9 : 0;

    auto samples =
        samples_from_log(rows, rep.run_epoch_ns, outcome.client_id);
    if (opt.exclude_warmup) {
      std::vector<LatencySample> kept;
      for (const auto& s : samples) {
        if (s.completion_offset_s >= delay_s + 1.0) kept.push_back(s);
      }
      samples.swap(kept);
    }
    append_scope_summaries(summary_rows,
                           "client_" + std::to_string(outcome.client_id),
                           samples, window_s, true);
    pooled.insert(pooled.end(), samples.begin(), samples.end());
    rep.samples[outcome.client_id] = std::move(samples);
  }
  append_scope_summaries(summary_rows, "run", pooled, window_s, false);
  rep.summary_path = rep.dir + "/summary.csv";
  write_summary_csv(rep.summary_path, summary_rows);
  rep.summary = std::move(summary_rows);

  bool all_ok = true;
  for (const auto& c : rep.clients) {
    if (c.aborted || c.completed != c.budget) {
      all_ok = false;
      if (rep.error.empty()) {
        rep.error = "client " + std::to_string(c.client_id) +
                    (c.aborted ? (": " + c.error)
                               : ": completed " + std::to_string(c.completed) +
                                     " of " + std::to_string(c.budget));
      }
    }
  }
  rep.success = all_ok && rep.error.empty();
}

inline RepOutcome execute_scenario_threads(const ScenarioSpec& scenario,
                                           const std::string& dir,
                                           uint64_t rep_index,
                                           const RunOptions& opt) {
  RepOutcome rep;
  rep.dir = dir;
  std::filesystem::create_directories(dir);

  std::vector<std::unique_ptr<Server>> servers;
  std::map<uint32_t, std::string> server_addresses;
  std::unique_ptr<Balancer> balancer;
  try {
    for (const auto& base : scenario.servers) {
      ServerSpec spec = base;
      spec.log_path =
          dir + "/server_" + std::to_string(spec.server_id) + ".events.csv";
      uint64_t seed = opt.seed ? *opt.seed + 1000 + spec.server_id
                               : spec.workload.seed;
      spec.workload.seed = rep_seed(seed, rep_index);
      servers.push_back(std::make_unique<Server>(spec));
      servers.back()->start();
      std::string addr = servers.back()->bound_address().str();
      server_addresses[spec.server_id] = addr;
      rep.server_addresses.emplace_back(spec.server_id, addr);
    }

    if (scenario.balancer) {
      BalancerSpec spec = scenario.balancer->spec;
      spec.backends.clear();
      for (const auto& t : scenario.balancer->backend_targets) {
        spec.backends.push_back(resolve_target(t, server_addresses, ""));
      }
      balancer = std::make_unique<Balancer>(spec);
      balancer->start();
      rep.balancer_address = balancer->bound_address();
    }

    for (const auto& [id, addr] : server_addresses) ping_server(addr);
  } catch (const std::exception& e) {
    rep.error = e.what();
    rep.run_epoch_ns = now_ns();
    for (const auto& c : scenario.clients) {
      ClientOutcome outcome;
      outcome.client_id = c.spec.client_id;
      outcome.budget = c.spec.total_requests;
      outcome.aborted = true;
      outcome.error = "not launched";
      outcome.log_path =
          dir + "/client_" + std::to_string(c.spec.client_id) + ".csv";
      rep.clients.push_back(outcome);
    }
    finalize_rep(scenario, rep, opt, scenario.window_s);
    rep.success = false;
    return rep;
  }

  rep.run_epoch_ns = now_ns();

  struct Slot {
    ClientSpec spec;
    ClientResult result;
    std::string error;
    double delay_s = 0;
  };
  std::vector<Slot> slots(scenario.clients.size());
  for (size_t i = 0; i < scenario.clients.size(); i++) {
    const auto& c = scenario.clients[i];
    Slot& slot = slots[i];
    slot.spec = c.spec;
    slot.delay_s = c.spec.start_delay_s;
    slot.spec.target_address = resolve_target(
        c.target, server_addresses, rep.balancer_address);
    slot.spec.log_path =
        dir + "/client_" + std::to_string(c.spec.client_id) + ".csv";
    uint64_t seed =
        opt.seed ? *opt.seed + c.spec.client_id : c.spec.seed;
    slot.spec.seed = rep_seed(seed, rep_index);
  }

  std::vector<std::thread> launchers;
  uint64_t epoch = rep.run_epoch_ns;
  for (auto& slot : slots) {
    launchers.emplace_back([&slot, epoch] {
      sleep_until_ns(epoch + static_cast<uint64_t>(slot.delay_s * 1e9));
      try {
        Client client(slot.spec);
        slot.result = client.run();
      } catch (const std::exception& e) {
        slot.error = e.what();
      }
    });
  }
  for (auto& t : launchers) t.join();

  // Let servers digest trailing byes so event logs close out cleanly.
  uint64_t bye_deadline = now_ns() + 5'000'000'000ull;
  for (const auto& server : servers) {
    while (server->active_clients() > 0 && now_ns() < bye_deadline) {
      sleep_for_ns(10'000'000);
    }
  }
  if (balancer) balancer->stop();
  for (auto& server : servers) server->stop();
  if (balancer) rep.assignments = balancer->assignment_history();

  for (auto& slot : slots) {
    ClientOutcome outcome;
    outcome.client_id = slot.spec.client_id;
    outcome.target_address = slot.spec.target_address;
    outcome.log_path = slot.spec.log_path;
    outcome.budget = slot.spec.total_requests;
    outcome.aborted = !slot.error.empty() || slot.result.transport_error;
    outcome.error = !slot.error.empty() ? slot.error : slot.result.error;
    outcome.conformance = slot.result.conformance;
    outcome.rates_path = dir + "/client_" +
                         std::to_string(slot.spec.client_id) + ".rates.csv";
    write_rates_csv(outcome.rates_path, outcome.conformance);
    rep.clients.push_back(std::move(outcome));
  }

  finalize_rep(scenario, rep, opt, scenario.window_s);
  return rep;
}

inline std::vector<std::string> server_argv(const ServerSpec& spec,
                                            const std::string& exe) {
  return {exe,
          "server",
          "--id",
          std::to_string(spec.server_id),
          "--listen",
          spec.listen_address,
          "--workers",
          std::to_string(spec.workers),
          "--queue-capacity",
          std::to_string(spec.queue_capacity),
          "--workload",
          spec.workload.name,
          "--mean-service-us",
          fmt_double(spec.workload.mean_service_us),
          "--sigma",
          fmt_double(spec.workload.sigma),
          "--items",
          std::to_string(spec.workload.item_count),
          "--zipf-exponent",
          fmt_double(spec.workload.zipf_exponent),
          "--seed",
          std::to_string(spec.workload.seed),
          "--exec",
          spec.workload.exec == ExecMode::kSleep ? "sleep" : "spin",
          "--log",
          spec.log_path};
}

inline RepOutcome execute_scenario_process(const ScenarioSpec& scenario,
                                           const std::string& dir,
                                           uint64_t rep_index,
                                           const RunOptions& opt) {
  RepOutcome rep;
  rep.dir = dir;
  std::filesystem::create_directories(dir);
  std::string exe = self_exe_path();

  std::vector<ChildProc> servers;
  std::map<uint32_t, std::string> server_addresses;
  std::optional<ChildProc> balancer;
  try {
    for (const auto& base : scenario.servers) {
      ServerSpec spec = base;
      spec.log_path =
          dir + "/server_" + std::to_string(spec.server_id) + ".events.csv";
      uint64_t seed = opt.seed ? *opt.seed + 1000 + spec.server_id
                               : spec.workload.seed;
      spec.workload.seed = rep_seed(seed, rep_index);
      ChildProc child = ChildProc::spawn(server_argv(spec, exe));
      auto line = child.read_line(10'000);
      if (!line || line->rfind("READY ", 0) != 0) {
        throw ConfigError("server " + std::to_string(spec.server_id) +
                          " failed to start" + (line ? ": " + *line : ""));
      }
      std::string addr = line->substr(6);
      server_addresses[spec.server_id] = addr;
      rep.server_addresses.emplace_back(spec.server_id, addr);
      servers.push_back(std::move(child));
    }

    if (scenario.balancer) {
      const auto& b = *scenario.balancer;
      std::vector<std::string> argv = {exe,
                                       "balancer",
                                       "--listen",
                                       b.spec.listen_address,
                                       "--policy",
                                       b.spec.policy};
      for (const auto& t : b.backend_targets) {
        argv.push_back("--backend");
        argv.push_back(resolve_target(t, server_addresses, ""));
      }
      if (!b.spec.declared_rates.empty()) {
        argv.push_back("--declared-rates");
        argv.push_back(declared_rates_to_string(b.spec.declared_rates));
      }
      ChildProc child = ChildProc::spawn(argv);
      auto line = child.read_line(10'000);
      if (!line || line->rfind("READY ", 0) != 0) {
        throw ConfigError("balancer failed to start" +
                          (line ? ": " + *line : std::string()));
      }
      rep.balancer_address = line->substr(6);
      balancer = std::move(child);
    }

    for (const auto& [id, addr] : server_addresses) ping_server(addr);
  } catch (const std::exception& e) {
    rep.error = e.what();
    rep.run_epoch_ns = now_ns();
    for (const auto& c : scenario.clients) {
      ClientOutcome outcome;
      outcome.client_id = c.spec.client_id;
      outcome.budget = c.spec.total_requests;
      outcome.aborted = true;
      outcome.error = "not launched";
      outcome.log_path =
          dir + "/client_" + std::to_string(c.spec.client_id) + ".csv";
      rep.clients.push_back(outcome);
    }
    finalize_rep(scenario, rep, opt, scenario.window_s);
    rep.success = false;
    return rep;
  }

  rep.run_epoch_ns = now_ns();

  struct Slot {
    const ScenarioClient* client = nullptr;
    std::string log_path;
    std::string rates_path;
    std::string error;
    bool aborted = false;
  };
  std::vector<Slot> slots(scenario.clients.size());
  std::vector<std::thread> launchers;
  uint64_t epoch = rep.run_epoch_ns;
  for (size_t i = 0; i < scenario.clients.size(); i++) {
    const auto& c = scenario.clients[i];
    Slot& slot = slots[i];
    slot.client = &c;
    slot.log_path =
        dir + "/client_" + std::to_string(c.spec.client_id) + ".csv";
    slot.rates_path =
        dir + "/client_" + std::to_string(c.spec.client_id) + ".rates.csv";
    std::string target = resolve_target(c.target, server_addresses,
                                        rep.balancer_address);
    uint64_t seed = opt.seed ? *opt.seed + c.spec.client_id : c.spec.seed;
    seed = rep_seed(seed, rep_index);
    std::vector<std::string> argv = {
        exe,
        "client",
        "--id",
        std::to_string(c.spec.client_id),
        "--target",
        target,
        "--requests",
        std::to_string(c.spec.total_requests),
        "--schedule",
        schedule_to_string(c.spec.schedule),
        "--senders",
        std::to_string(c.spec.sender_threads),
        "--seed",
        std::to_string(seed),
        "--response-timeout-s",
        fmt_double(c.spec.response_timeout_s),
        "--log",
        slot.log_path,
        "--rates",
        slot.rates_path};
    launchers.emplace_back([&slot, argv, epoch] {
      sleep_until_ns(epoch +
                     static_cast<uint64_t>(slot.client->spec.start_delay_s * 1e9));
      try {
        ChildProc child = ChildProc::spawn(argv);
        int code = child.wait();
        // Drain remaining output for an ERROR line.
        while (auto line = child.read_line(0)) {
          if (line->rfind("ERROR ", 0) == 0) slot.error = line->substr(6);
        }
        if (code != 0) {
          slot.aborted = true;
          if (slot.error.empty()) {
            slot.error = "client exited with status " + std::to_string(code);
          }
        }
      } catch (const std::exception& e) {
        slot.aborted = true;
        slot.error = e.what();
      }
    });
  }
  for (auto& t : launchers) t.join();

  sleep_for_ns(200'000'000);  // let servers digest trailing byes
  if (balancer) balancer->terminate();
  for (auto& child : servers) child.terminate();

  for (auto& slot : slots) {
    ClientOutcome outcome;
    outcome.client_id = slot.client->spec.client_id;
    outcome.log_path = slot.log_path;
    outcome.rates_path = slot.rates_path;
    outcome.budget = slot.client->spec.total_requests;
    outcome.aborted = slot.aborted;
    outcome.error = slot.error;
    try {
      outcome.conformance = read_rates_csv(slot.rates_path);
    } catch (const ConfigError&) {
      // client died before writing its sidecar
    }
    rep.clients.push_back(std::move(outcome));
  }

  finalize_rep(scenario, rep, opt, scenario.window_s);
  return rep;
}

inline RepOutcome execute_scenario(const ScenarioSpec& scenario,
                                   const std::string& dir, uint64_t rep_index,
                                   const RunOptions& opt) {
  return scenario.process_mode
             ? execute_scenario_process(scenario, dir, rep_index, opt)
             : execute_scenario_threads(scenario, dir, rep_index, opt);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// run / sweep / compare / stats entry points
// ---------------------------------------------------------------------------

inline ScenarioReport run_scenario(const ScenarioSpec& scenario,
                                   const RunOptions& opt) {
  ScenarioReport report;
  report.out_dir = opt.out_dir;
  std::filesystem::create_directories(opt.out_dir);
  uint64_t reps = opt.repetitions.value_or(scenario.repetitions);
  if (reps < 1) throw ConfigError("repetitions must be >= 1");

  for (uint64_t r = 0; r < reps; r++) {
    std::string dir =
        reps == 1 ? opt.out_dir : opt.out_dir + "/rep_" + std::to_string(r);
    report.reps.push_back(detail::execute_scenario(scenario, dir, r, opt));
  }
  report.success = true;
  for (const auto& rep : report.reps) {
    if (!rep.success) report.success = false;
  }

  report.manifest_path = opt.out_dir + "/manifest.txt";
  std::ofstream manifest(report.manifest_path, std::ios::trunc);
  manifest << "scenario: " << scenario.name << "\n"
           << "mode: " << (scenario.process_mode ? "process" : "thread") << "\n"
           << "repetitions: " << reps << "\n"
           << "window_s: " << fmt_double(scenario.window_s) << "\n"
           << "result: " << (report.success ? "ok" : "FAILED") << "\n";
  for (size_t r = 0; r < report.reps.size(); r++) {
    const auto& rep = report.reps[r];
    manifest << "\n[rep " << r << "] " << (rep.success ? "ok" : "FAILED")
             << "\n";
    if (!rep.error.empty()) manifest << "  error: " << rep.error << "\n";
    for (const auto& [id, addr] : rep.server_addresses) {
      manifest << "  server " << id << " at " << addr << "\n";
    }
    if (!rep.balancer_address.empty()) {
      manifest << "  balancer at " << rep.balancer_address << "\n";
    }
    for (const auto& [client_id, backend] : rep.assignments) {
      manifest << "  assignment: client " << client_id << " -> backend "
               << backend << "\n";
    }
    for (const auto& c : rep.clients) {
      manifest << "  client " << c.client_id << ": " << c.completed << "/"
               << c.budget << " responses, lifetime "
               << fmt_double(c.lifetime_s) << " s"
               << (c.aborted ? " ABORTED (" + c.error + ")" : "") << "\n";
      for (const auto& iv : c.conformance) {
        manifest << "    rate [" << fmt_double(iv.start_s) << ","
                 << fmt_double(iv.end_s) << ") scheduled "
                 << fmt_double(iv.scheduled_qps) << " achieved "
                 << fmt_double(iv.achieved_qps) << " qps\n";
      }
    }
    manifest << "  summary: " << rep.summary_path << "\n";
  }
  return report;
}

inline ScenarioSpec derive_sweep_cell(const SweepSpec& sweep, double qps) {
  ScenarioSpec scenario = sweep.base;
  auto budget = static_cast<uint64_t>(std::llround(qps * sweep.duration_s));
  if (budget < 1) budget = 1;
  for (auto& c : scenario.clients) {
    c.spec.schedule.intervals = {{0, qps}};
    c.spec.total_requests = budget;
  }
  return scenario;
}

inline SweepReport run_sweep(const SweepSpec& sweep, const RunOptions& opt) {
  SweepReport report;
  report.out_dir = opt.out_dir;
  std::filesystem::create_directories(opt.out_dir);
  uint64_t reps = opt.repetitions.value_or(sweep.base.repetitions);
  if (reps < 1) throw ConfigError("repetitions must be >= 1");
  if (reps == 1) {
    report.warnings.push_back(
        "repetitions=1: confidence interval columns left empty");
  }

  // qps -> per-repetition whole-run summaries, kept for aggregation.
  std::map<double, std::vector<LatencySummary>> per_qps;
  for (size_t qi = 0; qi < sweep.qps_values.size(); qi++) {
    double qps = sweep.qps_values[qi];
    ScenarioSpec scenario = derive_sweep_cell(sweep, qps);
    for (uint64_t r = 0; r < reps; r++) {
      std::string dir = opt.out_dir + "/qps_" + fmt_double(qps) + "/rep_" +
                        std::to_string(r);
      RunOptions cell_opt = opt;
      uint64_t base = opt.seed.value_or(1);
      cell_opt.seed = detail::rep_seed(detail::mix_seed(base, qi + 1), r + 1);
      RepOutcome rep = detail::execute_scenario(scenario, dir, 0, cell_opt);
      if (!rep.success) {
        report.failures.push_back("qps=" + fmt_double(qps) +
                                  " rep=" + std::to_string(r) + ": " +
                                  rep.error);
        continue;
      }
      std::vector<LatencySample> pooled;
      for (const auto& [id, samples] : rep.samples) {
        pooled.insert(pooled.end(), samples.begin(), samples.end());
      }
      auto summary = summarize(pooled);
      if (!summary) {
        report.failures.push_back("qps=" + fmt_double(qps) +
                                  " rep=" + std::to_string(r) +
                                  ": no samples");
        continue;
      }
      per_qps[qps].push_back(*summary);
      for (Metric m : {Metric::kMean, Metric::kP95, Metric::kP99}) {
        report.cells.push_back({qps, r, metric_name(m), metric_of(*summary, m)});
      }
    }
  }

  for (double qps : sweep.qps_values) {
    auto it = per_qps.find(qps);
    if (it == per_qps.end()) continue;  // every repetition failed
    const auto& summaries = it->second;
    for (Metric m : {Metric::kMean, Metric::kP95, Metric::kP99}) {
      std::vector<double> values;
      values.reserve(summaries.size());
      for (const auto& s : summaries) values.push_back(metric_of(s, m));
      CurveRow row;
      row.qps = qps;
      row.metric = metric_name(m);
      double sum = 0;
      for (double v : values) sum += v;
      row.mean = sum / static_cast<double>(values.size());
      if (values.size() >= 2) {
        auto [lo, hi] = confidence_interval(values, 0.95);
        row.ci_low = lo;
        row.ci_high = hi;
      }
      report.curve.push_back(row);
    }
  }

  report.cells_path = opt.out_dir + "/cells.csv";
  report.curve_path = opt.out_dir + "/curve.csv";
  write_cells_csv(report.cells_path, report.cells);
  write_curve_csv(report.curve_path, report.curve);

  if (reps >= 5) {
    std::vector<BoxplotRow> box_rows;
    for (double qps : sweep.qps_values) {
      auto it = per_qps.find(qps);
      if (it == per_qps.end() || it->second.size() < 5) continue;
      for (Metric m : {Metric::kMean, Metric::kP95, Metric::kP99}) {
        box_rows.push_back({qps, metric_name(m),
                            boxplot_export(it->second, m)});
      }
    }
    report.boxplot_path = opt.out_dir + "/boxplot.csv";
    write_boxplot_csv(report.boxplot_path, box_rows);
  }

  report.success = report.failures.empty();

  report.manifest_path = opt.out_dir + "/manifest.txt";
  std::ofstream manifest(report.manifest_path, std::ios::trunc);
  manifest << "sweep: " << sweep.base.name << "\n"
           << "qps:";
  for (double q : sweep.qps_values) manifest << ' ' << fmt_double(q);
  manifest << "\nduration_s: " << fmt_double(sweep.duration_s) << "\n"
           << "repetitions: " << reps << "\n"
           << "result: " << (report.success ? "ok" : "INCOMPLETE") << "\n";
  for (const auto& w : report.warnings) manifest << "warning: " << w << "\n";
  for (const auto& f : report.failures) manifest << "failed cell: " << f << "\n";
  manifest << "cells: " << report.cells_path << "\n"
           << "curve: " << report.curve_path << "\n";
  if (!report.boxplot_path.empty()) {
    manifest << "boxplot: " << report.boxplot_path << "\n";
  }
  return report;
}

/// Welch's t-test per metric between two sweep reports. The populations
/// are the per-qps-point aggregated metric values, one value per point,
/// so both sweeps must cover the same qps grid.
inline std::vector<std::pair<std::string, TTestResult>> compare_runs(
    const std::string& report_a, const std::string& report_b) {
  auto curve_path = [](const std::string& p) {
    if (p.size() >= 4 && p.substr(p.size() - 4) == ".csv") return p;
    return p + "/curve.csv";
  };
  auto a = read_curve_csv(curve_path(report_a));
  auto b = read_curve_csv(curve_path(report_b));

  auto by_metric = [](const std::vector<CurveRow>& rows) {
    std::map<std::string, std::map<double, double>> out;
    for (const auto& r : rows) out[r.metric][r.qps] = r.mean;
    return out;
  };
  auto ma = by_metric(a);
  auto mb = by_metric(b);

  std::vector<std::pair<std::string, TTestResult>> results;
  for (const std::string metric : {"mean", "p95", "p99"}) {
    auto ia = ma.find(metric);
    auto ib = mb.find(metric);
    if (ia == ma.end() || ib == mb.end()) {
      throw ConfigError("metric '" + metric +
                        "' missing from one of the reports");
    }
    std::string missing;
    for (const auto& [qps, v] : ia->second) {
      if (!ib->second.count(qps)) missing += " " + fmt_double(qps);
    }
    for (const auto& [qps, v] : ib->second) {
      if (!ia->second.count(qps)) missing += " " + fmt_double(qps);
    }
    if (!missing.empty()) {
      throw ConfigError("sweep grids differ; unmatched qps points:" + missing);
    }
    std::vector<double> va, vb;
    for (const auto& [qps, v] : ia->second) va.push_back(v);
    for (const auto& [qps, v] : ib->second) vb.push_back(v);
    if (va.size() < 2) {
      throw ConfigError("comparison needs >= 2 qps points, got " +
                        std::to_string(va.size()));
    }
    results.emplace_back(metric, welch_t(va, vb));
  }
  return results;
}

/// Summaries straight from client log files: windowed and total rows per
/// log (scoped by file stem) plus a pooled total across all logs. Offsets
/// are measured from the earliest send in any log.
inline std::vector<SummaryRow> stats_over_logs(
    const std::vector<std::string>& log_paths, double window_s) {
  if (log_paths.empty()) throw ConfigError("no log files given");
  std::vector<std::pair<std::string, std::vector<ClientLogRow>>> logs;
  uint64_t epoch = UINT64_MAX;
  for (const auto& path : log_paths) {
    auto rows = read_client_log(path);
    for (const auto& r : rows) epoch = std::min(epoch, r.send_ns);
    logs.emplace_back(detail::file_stem(path), std::move(rows));
  }
  if (epoch == UINT64_MAX) throw ConfigError("logs contain no samples");

  std::vector<SummaryRow> out;
  std::vector<LatencySample> pooled;
  for (const auto& [stem, rows] : logs) {
    auto samples = samples_from_log(rows, epoch, 0);
    detail::append_scope_summaries(out, stem, samples, window_s, true);
    pooled.insert(pooled.end(), samples.begin(), samples.end());
  }
  detail::append_scope_summaries(out, "all", pooled, window_s, false);
  return out;
}

}  // namespace taillab
