#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "taillab/balancer.hpp"
#include "taillab/client.hpp"
#include "taillab/config.hpp"
#include "taillab/server.hpp"

namespace taillab {

/// A client plus the unresolved target token from its scenario file:
/// "balancer", "server:<id>", or a literal host:port. Resolution to a
/// concrete address happens at run time, once listeners are bound.
struct ScenarioClient {
  ClientSpec spec;
  std::string target;
};

struct ScenarioBalancer {
  BalancerSpec spec;
  std::vector<std::string> backend_targets;  // "server:<id>" or host:port
};

struct ScenarioSpec {
  std::string name;
  std::vector<ServerSpec> servers;
  std::optional<ScenarioBalancer> balancer;
  std::vector<ScenarioClient> clients;
  uint64_t repetitions = 13;
  double window_s = 1.0;
  bool process_mode = false;  // components as OS processes instead of threads
};

/// A load sweep: the base scenario is run once per (qps, repetition) with
/// every client driven at that uniform rate for duration_s seconds (its
/// request budget becomes round(qps * duration_s)).
struct SweepSpec {
  ScenarioSpec base;
  std::vector<double> qps_values;
  double duration_s = 0;
};

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline double parse_double_token(const std::string& s, const std::string& where) {
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected a number, got '" + s + "'");
  }
}

inline uint64_t parse_u64_token(const std::string& s, const std::string& where) {
  try {
    size_t pos = 0;
    uint64_t v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected an integer, got '" + s + "'");
  }
}

/// "0:50,30:100,60:220" -> schedule intervals (offset_s:qps pairs).
inline QpsSchedule parse_schedule_value(const std::string& value,
                                        const std::string& where) {
  QpsSchedule schedule;
  for (const auto& part : split(value, ',')) {
    auto kv = split(part, ':');
    if (kv.size() != 2) {
      throw ConfigError(where + ": schedule entries are 'offset_s:qps', got '" +
                        part + "'");
    }
    schedule.intervals.push_back({parse_double_token(kv[0], where),
                                  parse_double_token(kv[1], where)});
  }
  try {
    validate_schedule(schedule);
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return schedule;
}

/// "1:500,2:200" -> client_id -> declared qps.
inline std::map<uint64_t, double> parse_declared_rates(
    const std::string& value, const std::string& where) {
  std::map<uint64_t, double> rates;
  for (const auto& part : split(value, ',')) {
    auto kv = split(part, ':');
    if (kv.size() != 2) {
      throw ConfigError(where +
                        ": declared_rates entries are 'client_id:qps', got '" +
                        part + "'");
    }
    uint64_t id = parse_u64_token(kv[0], where);
    double qps = parse_double_token(kv[1], where);
    if (!(qps > 0)) throw ConfigError(where + ": declared qps must be > 0");
    if (rates.count(id)) {
      throw ConfigError(where + ": duplicate declared rate for client " +
                        kv[0]);
    }
    rates[id] = qps;
  }
  return rates;
}

inline ExecMode parse_exec_mode(const std::string& value,
                                const std::string& where) {
  if (value == "spin") return ExecMode::kSpin;
  if (value == "sleep") return ExecMode::kSleep;
  throw ConfigError(where + ": exec must be 'spin' or 'sleep', got '" + value +
                    "'");
}

inline std::string loc(const ConfigFile& file, int line) {
  return file.path + ":" + std::to_string(line);
}

inline ServerSpec parse_server_section(const ConfigFile& file,
                                       const ConfigSection& section) {
  SectionReader r(file, section);
  ServerSpec spec;
  spec.server_id = static_cast<uint32_t>(r.get_u64("id"));
  spec.listen_address = r.get_str("listen", "127.0.0.1:0");
  spec.workers = static_cast<int>(r.get_u64("workers", 1));
  spec.queue_capacity = r.get_u64("queue_capacity", 0);
  spec.workload.name = r.get_str("workload", "fixed");
  spec.workload.mean_service_us = r.get_double("mean_service_us", 1000);
  spec.workload.sigma = r.get_double("sigma", 1);
  spec.workload.item_count = r.get_u64("items", 100);
  spec.workload.zipf_exponent = r.get_double("zipf_exponent", 1);
  spec.workload.seed = r.get_u64("seed", 1);
  if (r.has("exec")) {
    spec.workload.exec = parse_exec_mode(
        r.get_str("exec"), loc(file, r.entry_line("exec")));
  }
  r.finish();
  try {
    validate_workload(spec.workload);
    Addr::parse(spec.listen_address);
  } catch (const std::exception& e) {
    throw ConfigError(loc(file, section.line) + ": " + e.what());
  }
  if (spec.workers < 1) {
    throw ConfigError(loc(file, section.line) + ": workers must be >= 1");
  }
  return spec;
}

inline ScenarioClient parse_client_section(const ConfigFile& file,
                                           const ConfigSection& section,
                                           bool sweep_context) {
  SectionReader r(file, section);
  ScenarioClient client;
  client.spec.client_id = r.get_u64("id");
  client.target = r.get_str("target");
  client.spec.start_delay_s = r.get_double("start_delay_s", 0);
  client.spec.sender_threads = static_cast<int>(r.get_u64("senders", 1));
  client.spec.seed = r.get_u64("seed", 1);
  client.spec.response_timeout_s = r.get_double("response_timeout_s", 30);

  bool has_qps = r.has("qps");
  bool has_schedule = r.has("schedule");
  bool has_requests = r.has("requests");
  if (sweep_context) {
    if (has_qps || has_schedule || has_requests) {
      throw ConfigError(loc(file, section.line) +
                        ": qps/schedule/requests are controlled by [sweep] "
                        "and cannot be set per client in a sweep file");
    }
    client.spec.schedule.intervals.push_back({0, 1});  // placeholder
    client.spec.total_requests = 1;
  } else {
    if (has_qps == has_schedule) {
      throw ConfigError(loc(file, section.line) +
                        ": [client] needs exactly one of 'qps' or 'schedule'");
    }
    if (has_qps) {
      double qps = r.get_double("qps");
      if (!(qps > 0)) {
        throw ConfigError(loc(file, r.entry_line("qps")) +
                          ": qps must be > 0");
      }
      client.spec.schedule.intervals.push_back({0, qps});
    } else {
      client.spec.schedule = parse_schedule_value(
          r.get_str("schedule"), loc(file, r.entry_line("schedule")));
    }
    uint64_t requests = r.get_u64("requests");
    if (requests < 1) {
      throw ConfigError(loc(file, r.entry_line("requests")) +
                        ": requests must be >= 1");
    }
    client.spec.total_requests = requests;
  }

  r.finish();
  if (client.spec.start_delay_s < 0) {
    throw ConfigError(loc(file, section.line) +
                      ": start_delay_s must be >= 0");
  }
  if (client.spec.sender_threads < 1) {
    throw ConfigError(loc(file, section.line) + ": senders must be >= 1");
  }
  return client;
}

inline ScenarioBalancer parse_balancer_section(const ConfigFile& file,
                                               const ConfigSection& section) {
  SectionReader r(file, section);
  ScenarioBalancer balancer;
  balancer.spec.listen_address = r.get_str("listen", "127.0.0.1:0");
  balancer.spec.policy = r.get_str("policy", "round_robin");
  if (r.has("declared_rates")) {
    balancer.spec.declared_rates = parse_declared_rates(
        r.get_str("declared_rates"), loc(file, r.entry_line("declared_rates")));
  }
  if (r.has("backends")) {
    balancer.backend_targets = split(r.get_str("backends"), ',');
  }
  r.finish();
  try {
    Addr::parse(balancer.spec.listen_address);
    parse_policy(balancer.spec.policy);
  } catch (const std::exception& e) {
    throw ConfigError(loc(file, section.line) + ": " + e.what());
  }
  return balancer;
}

/// Checks one target token against the declared topology. Literal
/// host:port tokens pass through for user-provided external addresses.
inline void check_target(const std::string& target,
                         const std::set<uint32_t>& server_ids,
                         bool has_balancer, const std::string& where) {
  if (target == "balancer") {
    if (!has_balancer) {
      throw ConfigError(where +
                        ": target 'balancer' but the file has no [balancer]");
    }
    return;
  }
  if (target.rfind("server:", 0) == 0) {
    uint64_t id = parse_u64_token(target.substr(7), where);
    if (!server_ids.count(static_cast<uint32_t>(id))) {
      throw ConfigError(where + ": target references unknown server " +
                        target.substr(7));
    }
    return;
  }
  try {
    Addr::parse(target);
  } catch (const std::exception&) {
    throw ConfigError(where + ": target must be 'balancer', 'server:<id>', "
                      "or host:port, got '" + target + "'");
  }
}

inline ScenarioSpec parse_scenario_file(const ConfigFile& file,
                                        bool sweep_context) {
  ScenarioSpec spec;
  bool saw_scenario = false;
  for (const auto& section : file.sections) {
    if (section.name == "scenario") {
      if (saw_scenario) {
        throw ConfigError(loc(file, section.line) +
                          ": duplicate [scenario] section");
      }
      saw_scenario = true;
      SectionReader r(file, section);
      spec.name = r.get_str("name", "unnamed");
      spec.repetitions = r.get_u64("repetitions", 13);
      spec.window_s = r.get_double("window_s", 1.0);
      std::string mode = r.get_str("mode", "thread");
      if (mode == "process") {
        spec.process_mode = true;
      } else if (mode != "thread") {
        throw ConfigError(loc(file, r.entry_line("mode")) +
                          ": mode must be 'thread' or 'process'");
      }
      r.finish();
      if (spec.repetitions < 1) {
        throw ConfigError(loc(file, section.line) +
                          ": repetitions must be >= 1");
      }
      if (!(spec.window_s > 0)) {
        throw ConfigError(loc(file, section.line) + ": window_s must be > 0");
      }
    } else if (section.name == "server") {
      spec.servers.push_back(parse_server_section(file, section));
    } else if (section.name == "client") {
      spec.clients.push_back(
          parse_client_section(file, section, sweep_context));
    } else if (section.name == "balancer") {
      if (spec.balancer) {
        throw ConfigError(loc(file, section.line) +
                          ": duplicate [balancer] section");
      }
      spec.balancer = parse_balancer_section(file, section);
    } else if (section.name == "sweep") {
      if (!sweep_context) {
        throw ConfigError(loc(file, section.line) +
                          ": [sweep] is only valid in sweep files");
      }
    } else {
      throw ConfigError(loc(file, section.line) + ": unknown section [" +
                        section.name + "]");
    }
  }

  if (spec.servers.empty()) {
    throw ConfigError(file.path + ": scenario declares no [server]");
  }
  if (spec.clients.empty()) {
    throw ConfigError(file.path + ": scenario declares no [client]");
  }

  std::set<uint32_t> server_ids;
  for (const auto& s : spec.servers) {
    if (!server_ids.insert(s.server_id).second) {
      throw ConfigError(file.path + ": duplicate server id " +
                        std::to_string(s.server_id));
    }
  }
  std::set<uint64_t> client_ids;
  for (const auto& c : spec.clients) {
    if (!client_ids.insert(c.spec.client_id).second) {
      throw ConfigError(file.path + ": duplicate client id " +
                        std::to_string(c.spec.client_id));
    }
  }

  for (const auto& c : spec.clients) {
    check_target(c.target, server_ids, spec.balancer.has_value(),
                 file.path + ": client " + std::to_string(c.spec.client_id));
  }
  if (spec.balancer) {
    if (spec.balancer->backend_targets.empty()) {
      // Default: every declared server, in file order.
      for (const auto& s : spec.servers) {
        spec.balancer->backend_targets.push_back(
            "server:" + std::to_string(s.server_id));
      }
    }
    for (const auto& t : spec.balancer->backend_targets) {
      if (t == "balancer") {
        throw ConfigError(file.path + ": balancer cannot back itself");
      }
      check_target(t, server_ids, false, file.path + ": balancer backend");
    }
  }
  return spec;
}

}  // namespace detail

inline ScenarioSpec parse_scenario_text(const std::string& text,
                                        const std::string& label) {
  return detail::parse_scenario_file(parse_config_text(text, label), false);
}

inline ScenarioSpec parse_scenario(const std::string& path) {
  return detail::parse_scenario_file(parse_config(path), false);
}

namespace detail {

inline SweepSpec parse_sweep_file(const ConfigFile& file) {
  const ConfigSection* sweep_section = nullptr;
  for (const auto& s : file.sections) {
    if (s.name == "sweep") {
      if (sweep_section) {
        throw ConfigError(loc(file, s.line) + ": duplicate [sweep] section");
      }
      sweep_section = &s;
    }
  }
  if (!sweep_section) {
    throw ConfigError(file.path + ": sweep file needs a [sweep] section");
  }

  SweepSpec sweep;
  SectionReader r(file, *sweep_section);
  std::string qps_value = r.get_str("qps");
  sweep.duration_s = r.get_double("duration_s");
  r.finish();

  std::string where = loc(file, r.entry_line("qps"));
  for (const auto& tok : split(qps_value, ',')) {
    double q = parse_double_token(tok, where);
    if (!(q > 0)) throw ConfigError(where + ": qps values must be > 0");
    sweep.qps_values.push_back(q);
  }
  if (sweep.qps_values.empty()) {
    throw ConfigError(where + ": qps list is empty");
  }
  for (size_t i = 1; i < sweep.qps_values.size(); i++) {
    if (!(sweep.qps_values[i] > sweep.qps_values[i - 1])) {
      throw ConfigError(where + ": qps list must be strictly increasing");
    }
  }
  if (!(sweep.duration_s > 0)) {
    throw ConfigError(loc(file, sweep_section->line) +
                      ": duration_s must be > 0");
  }

  sweep.base = parse_scenario_file(file, true);
  return sweep;
}

}  // namespace detail

inline SweepSpec parse_sweep_text(const std::string& text,
                                  const std::string& label) {
  return detail::parse_sweep_file(parse_config_text(text, label));
}

inline SweepSpec parse_sweep(const std::string& path) {
  return detail::parse_sweep_file(parse_config(path));
}

}  // namespace taillab
