#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "taillab/client.hpp"
#include "taillab/stats.hpp"
#include "taillab/workload.hpp"

namespace taillab {

/// Shortest round-trippable decimal form; CSV cells never need quoting
/// because every schema in this project is numeric-or-identifier.
inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

struct CsvTable {
  std::string path;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;  // data rows, header excluded
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  CsvTable table;
  table.path = path;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    if (first) {
      table.header = cells;
      first = false;
    } else {
      table.rows.push_back(cells);
    }
  }
  if (first) throw ConfigError(path + ": empty file, expected a CSV header");
  return table;
}

inline void expect_columns(const CsvTable& table,
                           const std::vector<std::string>& expected) {
  if (table.header != expected) {
    std::string want;
    for (const auto& c : expected) {
      if (!want.empty()) want += ',';
      want += c;
    }
    std::string got;
    for (const auto& c : table.header) {
      if (!got.empty()) got += ',';
      got += c;
    }
    throw ConfigError(table.path + ": header mismatch, expected '" + want +
                      "' got '" + got + "'");
  }
}

inline uint64_t cell_u64(const CsvTable& t, size_t row, size_t col) {
  const std::string& s = t.rows[row][col];
  try {
    size_t pos = 0;
    uint64_t v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(t.path + ":" + std::to_string(row + 2) +
                      ": expected integer, got '" + s + "'");
  }
}

inline double cell_double(const CsvTable& t, size_t row, size_t col) {
  const std::string& s = t.rows[row][col];
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(t.path + ":" + std::to_string(row + 2) +
                      ": expected number, got '" + s + "'");
  }
}

// ---------------------------------------------------------------------------
// Per-request client log
// ---------------------------------------------------------------------------

struct ClientLogRow {
  uint64_t request_id = 0;
  uint64_t send_ns = 0;
  uint64_t recv_ns = 0;
  uint64_t sojourn_ns = 0;
  uint32_t server_id = 0;
  uint64_t server_recv_ns = 0;
  uint64_t service_start_ns = 0;
  uint64_t service_end_ns = 0;
};

inline const std::vector<std::string>& client_log_columns() {
  static const std::vector<std::string> cols = {
      "request_id",      "send_ns",          "recv_ns",
      "sojourn_ns",      "server_id",        "server_recv_ns",
      "service_start_ns", "service_end_ns"};
  return cols;
}

inline std::vector<ClientLogRow> read_client_log(const std::string& path) {
  CsvTable t = read_csv(path);
  expect_columns(t, client_log_columns());
  std::vector<ClientLogRow> rows;
  rows.reserve(t.rows.size());
  for (size_t i = 0; i < t.rows.size(); i++) {
    if (t.rows[i].size() != 8) {
      throw ConfigError(t.path + ":" + std::to_string(i + 2) +
                        ": expected 8 columns");
    }
    ClientLogRow r;
    r.request_id = cell_u64(t, i, 0);
    r.send_ns = cell_u64(t, i, 1);
    r.recv_ns = cell_u64(t, i, 2);
    r.sojourn_ns = cell_u64(t, i, 3);
    r.server_id = static_cast<uint32_t>(cell_u64(t, i, 4));
    r.server_recv_ns = cell_u64(t, i, 5);
    r.service_start_ns = cell_u64(t, i, 6);
    r.service_end_ns = cell_u64(t, i, 7);
    rows.push_back(r);
  }
  return rows;
}

/// Turns log rows into analysis samples. Completion offsets are measured
/// from epoch_ns so windows line up across clients of the same run.
inline std::vector<LatencySample> samples_from_log(
    const std::vector<ClientLogRow>& rows, uint64_t epoch_ns,
    uint64_t client_id) {
  std::vector<LatencySample> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    LatencySample s;
    s.sojourn_ns = r.sojourn_ns;
    s.service_ns = r.service_end_ns - r.service_start_ns;
    s.queue_ns = r.service_start_ns - r.server_recv_ns;
    s.completion_offset_s =
        r.recv_ns > epoch_ns ? (r.recv_ns - epoch_ns) / 1e9 : 0.0;
    s.client_id = client_id;
    s.server_id = r.server_id;
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Summary / t-test / sweep outputs
// ---------------------------------------------------------------------------

struct SummaryRow {
  std::string scope;
  double window_start_s = 0;
  double window_end_s = 0;
  uint64_t n = 0;
  double mean_ms = 0;
  double p95_ms = 0;
  double p99_ms = 0;
};

inline void write_summary_csv(const std::string& path,
                              const std::vector<SummaryRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path);
  out << "scope,window_start_s,window_end_s,n,mean_ms,p95_ms,p99_ms\n";
  for (const auto& r : rows) {
    out << r.scope << ',' << fmt_double(r.window_start_s) << ','
        << fmt_double(r.window_end_s) << ',' << r.n << ','
        << fmt_double(r.mean_ms) << ',' << fmt_double(r.p95_ms) << ','
        << fmt_double(r.p99_ms) << '\n';
  }
}

inline std::vector<SummaryRow> read_summary_csv(const std::string& path) {
  CsvTable t = read_csv(path);
  expect_columns(t, {"scope", "window_start_s", "window_end_s", "n", "mean_ms",
                     "p95_ms", "p99_ms"});
  std::vector<SummaryRow> rows;
  for (size_t i = 0; i < t.rows.size(); i++) {
    SummaryRow r;
    r.scope = t.rows[i][0];
    r.window_start_s = cell_double(t, i, 1);
    r.window_end_s = cell_double(t, i, 2);
    r.n = cell_u64(t, i, 3);
    r.mean_ms = cell_double(t, i, 4);
    r.p95_ms = cell_double(t, i, 5);
    r.p99_ms = cell_double(t, i, 6);
    rows.push_back(r);
  }
  return rows;
}

inline void write_ttest_csv(const std::string& path,
                            const std::vector<std::pair<std::string, TTestResult>>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path);
  out << "metric,t,dof,p,reject\n";
  for (const auto& [metric, r] : rows) {
    out << metric << ',' << fmt_double(r.t_statistic) << ','
        << fmt_double(r.degrees_of_freedom) << ',' << fmt_double(r.p_value)
        << ',' << (r.reject_at_0_05 ? 1 : 0) << '\n';
  }
}

/// One aggregated point on a latency-vs-load curve. CI bounds are absent
/// when only a single repetition was run.
struct CurveRow {
  double qps = 0;
  std::string metric;
  double mean = 0;
  std::optional<double> ci_low;
  std::optional<double> ci_high;
};

inline void write_curve_csv(const std::string& path,
                            const std::vector<CurveRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path);
  out << "qps,metric,mean,ci_low,ci_high\n";
  for (const auto& r : rows) {
    out << fmt_double(r.qps) << ',' << r.metric << ',' << fmt_double(r.mean)
        << ',' << (r.ci_low ? fmt_double(*r.ci_low) : "") << ','
        << (r.ci_high ? fmt_double(*r.ci_high) : "") << '\n';
  }
}

inline std::vector<CurveRow> read_curve_csv(const std::string& path) {
  CsvTable t = read_csv(path);
  expect_columns(t, {"qps", "metric", "mean", "ci_low", "ci_high"});
  std::vector<CurveRow> rows;
  for (size_t i = 0; i < t.rows.size(); i++) {
    if (t.rows[i].size() != 5) {
      throw ConfigError(t.path + ":" + std::to_string(i + 2) +
                        ": expected 5 columns");
    }
    CurveRow r;
    r.qps = cell_double(t, i, 0);
    r.metric = t.rows[i][1];
    r.mean = cell_double(t, i, 2);
    if (!t.rows[i][3].empty()) r.ci_low = cell_double(t, i, 3);
    if (!t.rows[i][4].empty()) r.ci_high = cell_double(t, i, 4);
    rows.push_back(r);
  }
  return rows;
}

/// One raw sweep cell: the value of one metric for one (qps, repetition)
/// run, prior to aggregation.
struct CellRow {
  double qps = 0;
  uint64_t rep = 0;
  std::string metric;
  double value = 0;
};

inline void write_cells_csv(const std::string& path,
                            const std::vector<CellRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path);
  out << "qps,rep,metric,value\n";
  for (const auto& r : rows) {
    out << fmt_double(r.qps) << ',' << r.rep << ',' << r.metric << ','
        << fmt_double(r.value) << '\n';
  }
}

inline std::vector<CellRow> read_cells_csv(const std::string& path) {
  CsvTable t = read_csv(path);
  expect_columns(t, {"qps", "rep", "metric", "value"});
  std::vector<CellRow> rows;
  for (size_t i = 0; i < t.rows.size(); i++) {
    CellRow r;
    r.qps = cell_double(t, i, 0);
    r.rep = cell_u64(t, i, 1);
    r.metric = t.rows[i][2];
    r.value = cell_double(t, i, 3);
    rows.push_back(r);
  }
  return rows;
}

/// Per-interval offered-load conformance sidecar (one file per client).
inline void write_rates_csv(const std::string& path,
                            const std::vector<IntervalRate>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path);
  out << "start_s,end_s,scheduled_qps,planned_n,sent_n,achieved_qps\n";
  for (const auto& r : rows) {
    out << fmt_double(r.start_s) << ',' << fmt_double(r.end_s) << ','
        << fmt_double(r.scheduled_qps) << ',' << r.planned_n << ','
        << r.sent_n << ',' << fmt_double(r.achieved_qps) << '\n';
  }
}

inline std::vector<IntervalRate> read_rates_csv(const std::string& path) {
  CsvTable t = read_csv(path);
  expect_columns(t, {"start_s", "end_s", "scheduled_qps", "planned_n",
                     "sent_n", "achieved_qps"});
  std::vector<IntervalRate> rows;
  for (size_t i = 0; i < t.rows.size(); i++) {
    IntervalRate r;
    r.start_s = cell_double(t, i, 0);
    r.end_s = cell_double(t, i, 1);
    r.scheduled_qps = cell_double(t, i, 2);
    r.planned_n = cell_u64(t, i, 3);
    r.sent_n = cell_u64(t, i, 4);
    r.achieved_qps = cell_double(t, i, 5);
    rows.push_back(r);
  }
  return rows;
}

/// Boxplot quartiles per sweep point and metric, plot-ready.
struct BoxplotRow {
  double qps = 0;
  std::string metric;
  BoxplotRecord record;
};

inline void write_boxplot_csv(const std::string& path,
                              const std::vector<BoxplotRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path);
  out << "qps,metric,min,q1,median,q3,max\n";
  for (const auto& r : rows) {
    out << fmt_double(r.qps) << ',' << r.metric << ','
        << fmt_double(r.record.min) << ',' << fmt_double(r.record.q1) << ','
        << fmt_double(r.record.median) << ',' << fmt_double(r.record.q3) << ','
        << fmt_double(r.record.max) << '\n';
  }
}

}  // namespace taillab
