#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <poll.h>

#include "taillab/clock.hpp"
#include "taillab/net.hpp"
#include "taillab/proto.hpp"
#include "taillab/workload.hpp"

namespace taillab {

/// Piecewise-constant target request rate. Interval i covers
/// [start_offset of i, start_offset of i+1); the last interval runs
/// until the request budget is exhausted.
struct QpsSchedule {
  struct Interval {
    double start_offset_s = 0;
    double qps = 0;
  };
  std::vector<Interval> intervals;
};

inline void validate_schedule(const QpsSchedule& s) {
  if (s.intervals.empty()) throw ConfigError("schedule has no intervals");
  if (s.intervals.front().start_offset_s != 0.0) {
    throw ConfigError("first schedule interval must start at 0");
  }
  for (size_t i = 0; i < s.intervals.size(); i++) {
    if (!(s.intervals[i].qps > 0)) throw ConfigError("schedule qps must be > 0");
    if (i > 0 && !(s.intervals[i].start_offset_s >
                   s.intervals[i - 1].start_offset_s)) {
      throw ConfigError("schedule start offsets must be strictly increasing");
    }
  }
}

/// Target rate at an elapsed time (half-open interval lookup).
inline double current_rate(const QpsSchedule& s, double elapsed_s) {
  double rate = s.intervals.front().qps;
  for (const auto& iv : s.intervals) {
    if (iv.start_offset_s <= elapsed_s) rate = iv.qps;
    else break;
  }
  return rate;
}

/// Pre-plans all send instants as offsets from the client's epoch:
/// a Poisson arrival process whose rate follows the schedule. Pure in
/// (schedule, n, seed) so a rerun issues the identical arrival pattern.
inline std::vector<uint64_t> plan_send_offsets_ns(const QpsSchedule& schedule,
                                                  uint64_t n, uint64_t seed) {
  validate_schedule(schedule);
  detail::Rng rng(detail::mix_seed(seed, 0x706c616eull));
  std::vector<uint64_t> offsets;
  offsets.reserve(n);
  double t_s = 0;
  for (uint64_t k = 0; k < n; k++) {
    double rate = current_rate(schedule, t_s);
    double u = rng.next_unit();
    t_s += -std::log1p(-u) / rate;
    offsets.push_back(static_cast<uint64_t>(t_s * 1e9));
  }
  return offsets;
}

struct ClientSpec {
  uint64_t client_id = 0;
  std::string target_address;
  double start_delay_s = 0;      // scenario-relative; applied by the launcher
  uint64_t total_requests = 1;   // the client-owned budget
  QpsSchedule schedule;
  int sender_threads = 1;
  uint64_t seed = 1;
  std::string log_path;              // optional CSV log
  double response_timeout_s = 30.0;  // abort when responses stall this long
};

inline void validate_client(const ClientSpec& spec) {
  if (spec.total_requests < 1) throw ConfigError("total_requests must be >= 1");
  if (spec.sender_threads < 1) throw ConfigError("sender_threads must be >= 1");
  validate_schedule(spec.schedule);
  Addr::parse(spec.target_address);
}

struct ClientLogEntry {
  uint64_t request_id = 0;
  uint64_t send_ns = 0;
  uint64_t recv_ns = 0;
  uint64_t sojourn_ns = 0;
  ResponsePayload resp;
};

/// Per-interval send-rate accounting. Sends are attributed to the window
/// of their planned instant, so a late send never hides offered load.
struct IntervalRate {
  double start_s = 0;
  double end_s = 0;
  double scheduled_qps = 0;
  uint64_t planned_n = 0;
  uint64_t sent_n = 0;
  double achieved_qps = 0;
};

struct ClientResult {
  std::vector<ClientLogEntry> entries;
  uint64_t duplicate_responses = 0;
  uint64_t unknown_responses = 0;
  bool transport_error = false;
  std::string error;
  uint64_t epoch_ns = 0;      // pacing epoch: connect + hello done
  uint64_t finished_ns = 0;   // last response (or abort)
  std::vector<IntervalRate> conformance;
};

/// Open-loop load generator. Sends REQUEST frames at pre-planned instants
/// regardless of response progress, records per-request timing, and
/// terminates itself once its budget of responses has arrived.
class Client {
 public:
  explicit Client(ClientSpec spec) : spec_(std::move(spec)) {
    validate_client(spec_);
  }

  ClientResult run() {
    ClientResult result;
    result.entries.reserve(spec_.total_requests);
    std::vector<uint64_t> planned =
        plan_send_offsets_ns(spec_.schedule, spec_.total_requests, spec_.seed);

    try {
      conn_ = TcpConn::dial(Addr::parse(spec_.target_address));
    } catch (const NetError& e) {
      result.transport_error = true;
      result.error = e.what();
      flush_log(result);
      return result;
    }

    try {
      Frame hello = make_frame(FrameKind::kClientHello, 0, spec_.client_id);
      conn_.write_all(encode(hello));
    } catch (const NetError& e) {
      result.transport_error = true;
      result.error = e.what();
      flush_log(result);
      return result;
    }

    send_ns_.assign(spec_.total_requests, 0);
    completed_.assign(spec_.total_requests, 0);
    epoch_ns_ = now_ns();
    result.epoch_ns = epoch_ns_;

    std::vector<std::thread> senders;
    for (int j = 0; j < spec_.sender_threads; j++) {
      senders.emplace_back([this, &planned, j] { sender_loop(planned, j); });
    }
    receiver_loop(result);
    for (auto& t : senders) t.join();

    if (!aborted_.load() && completed_count_ == spec_.total_requests) {
      try {
        Frame bye = make_frame(FrameKind::kClientBye, 0, spec_.client_id);
        std::lock_guard<std::mutex> lk(write_mu_);
        conn_.write_all(encode(bye));
      } catch (const NetError&) {
        // server already gone; the budget is complete either way
      }
    }
    conn_.close();

    result.finished_ns = last_progress_ns_.load();
    if (result.finished_ns == 0) result.finished_ns = now_ns();
    if (aborted_.load()) {
      result.transport_error = true;
      result.error = abort_reason_;
    }
    result.conformance = build_conformance(planned);
    flush_log(result);
    return result;
  }

  const ClientSpec& spec() const { return spec_; }

 private:
  void sender_loop(const std::vector<uint64_t>& planned, int thread_index) {
    tighten_timer_slack();
    for (uint64_t k = static_cast<uint64_t>(thread_index);
         k < planned.size();
         k += static_cast<uint64_t>(spec_.sender_threads)) {
      if (aborted_.load()) return;
      sleep_until_ns(epoch_ns_ + planned[k]);
      if (aborted_.load()) return;
      Frame req = make_frame(FrameKind::kRequest, k, spec_.client_id);
      std::vector<uint8_t> bytes = encode(req);
      uint64_t send_ns = now_ns();  // stamped before the socket write
      send_ns_[k] = send_ns;
      {
        std::lock_guard<std::mutex> lk(write_mu_);
        try {
          conn_.write_all(bytes);
        } catch (const NetError& e) {
          abort_run(std::string("send failed: ") + e.what());
          return;
        }
      }
      sent_count_.fetch_add(1);
    }
  }

  void receiver_loop(ClientResult& result) {
    FrameReader reader;
    std::vector<uint8_t> buf(64 * 1024);
    conn_.set_nonblocking(true);
    last_progress_ns_.store(now_ns());
    uint64_t timeout_ns =
        static_cast<uint64_t>(spec_.response_timeout_s * 1e9);

    while (!aborted_.load() && completed_count_ < spec_.total_requests) {
      pollfd pfd{conn_.fd(), POLLIN, 0};
      int rc = ::poll(&pfd, 1, 200);
      if (rc < 0) continue;
      if (rc == 0) {
        if (now_ns() - last_progress_ns_.load() > timeout_ns) {
          abort_run("response timeout: no response for " +
                    std::to_string(spec_.response_timeout_s) + " s");
          return;
        }
        continue;
      }
      ssize_t n = conn_.read_some(buf);
      if (n < 0) continue;
      if (n == 0) {
        abort_run("connection closed by peer");
        return;
      }
      uint64_t recv_ns = now_ns();
      reader.feed(std::span<const uint8_t>(buf.data(), static_cast<size_t>(n)));
      for (;;) {
        DecodeResult r = reader.next();
        if (r.status == DecodeStatus::kIncomplete) break;
        if (r.status != DecodeStatus::kOk) {
          abort_run("protocol error on response stream");
          return;
        }
        handle_response(r.frame, recv_ns, result);
        if (completed_count_ == spec_.total_requests) return;
      }
    }
  }

  /// Response bookkeeping: one log entry per completed request, duplicate
  /// and unknown ids recorded without producing entries.
  void handle_response(const Frame& f, uint64_t recv_ns, ClientResult& result) {
    if (f.kind != FrameKind::kResponse) return;
    uint64_t k = f.request_id;
    if (k >= spec_.total_requests || send_ns_[k] == 0) {
      result.unknown_responses++;
      return;
    }
    if (completed_[k]) {
      result.duplicate_responses++;
      return;
    }
    completed_[k] = 1;
    completed_count_++;
    last_progress_ns_.store(recv_ns);

    ClientLogEntry e;
    e.request_id = k;
    e.send_ns = send_ns_[k];
    e.recv_ns = recv_ns;
    e.sojourn_ns = recv_ns - e.send_ns;
    if (f.payload.size() >= kResponsePayloadSize) {
      e.resp = decode_response_payload(f.payload);
    }
    result.entries.push_back(e);
  }

  void abort_run(std::string reason) {
    bool expected = false;
    if (aborted_.compare_exchange_strong(expected, true)) {
      abort_reason_ = std::move(reason);
      conn_.shutdown_both();
    }
  }

  std::vector<IntervalRate> build_conformance(
      const std::vector<uint64_t>& planned) const {
    std::vector<IntervalRate> out;
    const auto& ivs = spec_.schedule.intervals;
    double last_s = planned.empty() ? 0 : planned.back() / 1e9;
    for (size_t i = 0; i < ivs.size(); i++) {
      IntervalRate r;
      bool last = i + 1 == ivs.size();
      r.start_s = ivs[i].start_offset_s;
      r.end_s = last ? last_s : ivs[i + 1].start_offset_s;
      r.scheduled_qps = ivs[i].qps;
      for (uint64_t k = 0; k < planned.size(); k++) {
        double planned_s = planned[k] / 1e9;
        // The final interval runs to the last planned send, inclusive.
        bool inside = planned_s >= r.start_s &&
                      (planned_s < r.end_s || (last && planned_s <= r.end_s));
        if (inside) {
          r.planned_n++;
          if (send_ns_[k] != 0) r.sent_n++;
        }
      }
      double len = r.end_s - r.start_s;
      r.achieved_qps = len > 0 ? static_cast<double>(r.sent_n) / len : 0;
      out.push_back(r);
    }
    return out;
  }

  void flush_log(const ClientResult& result) const {
    if (spec_.log_path.empty()) return;
    std::ofstream out(spec_.log_path, std::ios::trunc);
    if (!out) throw ConfigError("cannot open client log " + spec_.log_path);
    out << "request_id,send_ns,recv_ns,sojourn_ns,server_id,server_recv_ns,"
           "service_start_ns,service_end_ns\n";
    for (const auto& e : result.entries) {
      out << e.request_id << ',' << e.send_ns << ',' << e.recv_ns << ','
          << e.sojourn_ns << ',' << e.resp.server_id << ','
          << e.resp.server_recv_ns << ',' << e.resp.service_start_ns << ','
          << e.resp.service_end_ns << '\n';
    }
  }

  ClientSpec spec_;
  TcpConn conn_;
  std::mutex write_mu_;
  uint64_t epoch_ns_ = 0;

  // send_ns_[k] is written by exactly one sender thread before the wire
  // write and read by the receiver only after a response for k arrives;
  // the TCP round trip orders the two accesses.
  std::vector<uint64_t> send_ns_;
  std::vector<uint8_t> completed_;  // receiver-owned
  uint64_t completed_count_ = 0;
  std::atomic<uint64_t> sent_count_{0};
  std::atomic<uint64_t> last_progress_ns_{0};
  std::atomic<bool> aborted_{false};
  std::string abort_reason_;
};

}  // namespace taillab
