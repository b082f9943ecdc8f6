#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <poll.h>

#include "taillab/clock.hpp"
#include "taillab/net.hpp"
#include "taillab/proto.hpp"
#include "taillab/workload.hpp"

namespace taillab {

enum class Policy : uint8_t { kRoundRobin, kLoadAware };

inline Policy parse_policy(const std::string& name) {
  if (name == "round_robin") return Policy::kRoundRobin;
  if (name == "load_aware") return Policy::kLoadAware;
  throw ConfigError("unknown policy '" + name +
                    "' (expected round_robin or load_aware)");
}

/// Trailing window over which per-client request rates are measured when
/// no declared rate is available.
inline constexpr uint64_t kRateWindowNs = 5'000'000'000ull;

/// Connection-to-backend assignment. Pure bookkeeping, no sockets, so the
/// policy behavior is testable in isolation. Not thread-safe; the owner
/// serializes access.
class AssignState {
 public:
  AssignState(size_t backend_count, Policy policy,
              std::map<uint64_t, double> declared_rates = {})
      : backend_count_(backend_count),
        policy_(policy),
        declared_rates_(std::move(declared_rates)) {
    if (backend_count_ == 0) throw ConfigError("need at least one backend");
  }

  /// Picks a backend for a newly arrived client and records the
  /// assignment. round_robin walks backends in arrival order; load_aware
  /// picks the backend with the lowest total assigned rate, breaking ties
  /// toward the lowest index.
  size_t assign(uint64_t client_id, uint64_t now_ns = 0) {
    release(client_id);
    size_t b = 0;
    if (policy_ == Policy::kRoundRobin) {
      b = arrivals_ % backend_count_;
    } else {
      double best = backend_rate(0, now_ns);
      for (size_t i = 1; i < backend_count_; i++) {
        double r = backend_rate(i, now_ns);
        if (r < best) {
          best = r;
          b = i;
        }
      }
    }
    arrivals_++;
    clients_[client_id].backend = b;
    return b;
  }

  /// Pins a client to a specific backend (dial-failure fallback); does not
  /// consume an arrival slot.
  void assign_to(uint64_t client_id, size_t backend) {
    if (backend >= backend_count_) throw ConfigError("backend index out of range");
    clients_[client_id].backend = backend;
  }

  /// Forgets a departed client so its rate stops counting against its
  /// backend.
  void release(uint64_t client_id) { clients_.erase(client_id); }

  void record_request(uint64_t client_id, uint64_t t_ns) {
    auto it = clients_.find(client_id);
    if (it == clients_.end()) return;
    auto& stamps = it->second.request_ns;
    stamps.push_back(t_ns);
    while (!stamps.empty() && stamps.front() + kRateWindowNs < t_ns) {
      stamps.pop_front();
    }
  }

  /// A client's current rate: its declared rate when one was given,
  /// otherwise the measured request rate over the trailing window.
  double client_rate(uint64_t client_id, uint64_t now_ns) const {
    auto d = declared_rates_.find(client_id);
    if (d != declared_rates_.end()) return d->second;
    auto it = clients_.find(client_id);
    if (it == clients_.end()) return 0;
    const auto& stamps = it->second.request_ns;
    uint64_t cut = now_ns > kRateWindowNs ? now_ns - kRateWindowNs : 0;
    size_t n = 0;
    for (auto r = stamps.rbegin(); r != stamps.rend() && *r >= cut; ++r) n++;
    return static_cast<double>(n) / (kRateWindowNs / 1e9);
  }

  double backend_rate(size_t backend, uint64_t now_ns) const {
    double sum = 0;
    for (const auto& [id, st] : clients_) {
      if (st.backend == backend) sum += client_rate(id, now_ns);
    }
    return sum;
  }

  std::optional<size_t> backend_of(uint64_t client_id) const {
    auto it = clients_.find(client_id);
    if (it == clients_.end()) return std::nullopt;
    return it->second.backend;
  }

  size_t live_clients() const { return clients_.size(); }
  size_t backend_count() const { return backend_count_; }

 private:
  struct ClientState {
    size_t backend = 0;
    std::deque<uint64_t> request_ns;
  };

  size_t backend_count_;
  Policy policy_;
  std::map<uint64_t, double> declared_rates_;
  std::map<uint64_t, ClientState> clients_;
  uint64_t arrivals_ = 0;
};

struct BalancerSpec {
  std::string listen_address = "127.0.0.1:0";
  std::vector<std::string> backends;
  std::string policy = "round_robin";
  std::map<uint64_t, double> declared_rates;
};

inline void validate_balancer(const BalancerSpec& spec) {
  if (spec.backends.empty()) throw ConfigError("need at least one backend");
  Addr::parse(spec.listen_address);
  for (const auto& b : spec.backends) Addr::parse(b);
  parse_policy(spec.policy);
}

/// Connection-level proxy: each client connection is pinned to one backend
/// for its whole lifetime and its bytes are relayed unmodified in both
/// directions. The balancer reads a copy of the client's stream only to
/// learn its identity (the hello frame) and to count its requests.
class Balancer {
 public:
  explicit Balancer(BalancerSpec spec) : spec_(std::move(spec)) {
    validate_balancer(spec_);
    state_.emplace(spec_.backends.size(), parse_policy(spec_.policy),
                   spec_.declared_rates);
    listener_ = TcpListener::listen(Addr::parse(spec_.listen_address));
  }

  ~Balancer() { stop(); }

  void start() {
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  void stop() {
    bool expected = false;
    if (!stopping_.compare_exchange_strong(expected, true)) return;
    wakeup_.signal();
    if (accept_thread_.joinable()) accept_thread_.join();
    std::vector<std::shared_ptr<Session>> sessions;
    {
      std::lock_guard<std::mutex> lk(sessions_mu_);
      sessions = sessions_;
    }
    for (auto& s : sessions) {
      s->client.shutdown_both();
      s->backend.shutdown_both();
    }
    for (auto& s : sessions) {
      if (s->thread.joinable()) s->thread.join();
    }
    {
      std::lock_guard<std::mutex> lk(sessions_mu_);
      sessions_.clear();
    }
  }

  std::string bound_address() const { return listener_.bound_address().str(); }

  /// (client_id, backend index) in the order connections were established.
  std::vector<std::pair<uint64_t, size_t>> assignment_history() const {
    std::lock_guard<std::mutex> lk(state_mu_);
    return history_;
  }

  uint64_t relayed_requests() const { return relayed_requests_.load(); }
  size_t live_sessions() const {
    std::lock_guard<std::mutex> lk(sessions_mu_);
    size_t n = 0;
    for (const auto& s : sessions_) {
      if (!s->done.load()) n++;
    }
    return n;
  }

 private:
  struct Session {
    TcpConn client;
    TcpConn backend;
    std::thread thread;
    std::atomic<bool> done{false};
    bool parse_broken = false;  // stop frame-counting on a malformed stream
  };

  void accept_loop() {
    while (!stopping_.load()) {
      pollfd fds[2];
      fds[0] = {wakeup_.fd(), POLLIN, 0};
      fds[1] = {listener_.fd(), POLLIN, 0};
      int rc = ::poll(fds, 2, -1);
      if (rc < 0) continue;
      if (fds[0].revents) wakeup_.drain();
      if (stopping_.load()) return;
      if (!(fds[1].revents & POLLIN)) continue;
      for (;;) {
        TcpConn conn = listener_.accept();
        if (!conn.valid()) break;
        auto session = std::make_shared<Session>();
        session->client = std::move(conn);
        {
          std::lock_guard<std::mutex> lk(sessions_mu_);
          sessions_.push_back(session);
        }
        session->thread =
            std::thread([this, session] { session_loop(session); });
      }
      reap_finished();
    }
  }

  void reap_finished() {
    std::lock_guard<std::mutex> lk(sessions_mu_);
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      if ((*it)->done.load()) {
        if ((*it)->thread.joinable()) (*it)->thread.join();
        it = sessions_.erase(it);
      } else {
        ++it;
      }
    }
  }

  /// Reads until the client identifies itself, then dials a backend and
  /// relays. Connections that close before the hello never reach a
  /// backend and never count as arrivals.
  void session_loop(std::shared_ptr<Session> session) {
    uint64_t client_id = 0;
    bool assigned = false;
    try {
      FrameReader reader;
      std::vector<uint8_t> pending;  // raw bytes owed to the backend
      if (!read_hello(*session, reader, pending, client_id)) {
        session->client.close();
        session->done.store(true);
        return;
      }

      if (!dial_backend(*session, client_id)) {
        session->client.close();
        session->done.store(true);
        return;
      }
      assigned = true;

      session->backend.write_all(pending);
      count_requests(*session, reader, client_id);
      relay(*session, reader, client_id);
    } catch (const NetError&) {
      // either side vanished mid-relay; tear the pair down below
    }
    session->client.shutdown_both();
    session->backend.shutdown_both();
    session->client.close();
    session->backend.close();
    if (assigned) {
      std::lock_guard<std::mutex> lk(state_mu_);
      state_->release(client_id);
    }
    session->done.store(true);
  }

  bool read_hello(Session& session, FrameReader& reader,
                  std::vector<uint8_t>& pending, uint64_t& client_id) {
    std::vector<uint8_t> buf(16 * 1024);
    while (!stopping_.load()) {
      pollfd pfd{session.client.fd(), POLLIN, 0};
      int rc = ::poll(&pfd, 1, 500);
      if (rc <= 0) continue;
      ssize_t n = session.client.read_some(buf);
      if (n <= 0) return false;
      pending.insert(pending.end(), buf.begin(), buf.begin() + n);
      reader.feed(std::span<const uint8_t>(buf.data(), static_cast<size_t>(n)));
      DecodeResult r = reader.next();
      if (r.status == DecodeStatus::kIncomplete) continue;
      if (r.status != DecodeStatus::kOk ||
          r.frame.kind != FrameKind::kClientHello) {
        return false;
      }
      client_id = r.frame.client_id;
      return true;
    }
    return false;
  }

  /// Dials the policy's pick; if that backend is down, walks the others in
  /// index order. Only a successful dial is recorded as an assignment.
  bool dial_backend(Session& session, uint64_t client_id) {
    size_t choice;
    {
      std::lock_guard<std::mutex> lk(state_mu_);
      choice = state_->assign(client_id, now_ns());
    }
    std::vector<size_t> order{choice};
    for (size_t i = 0; i < spec_.backends.size(); i++) {
      if (i != choice) order.push_back(i);
    }
    for (size_t b : order) {
      try {
        session.backend = TcpConn::dial(Addr::parse(spec_.backends[b]));
        session.backend.set_nodelay();
        std::lock_guard<std::mutex> lk(state_mu_);
        state_->assign_to(client_id, b);
        history_.emplace_back(client_id, b);
        return true;
      } catch (const NetError&) {
        continue;
      }
    }
    std::lock_guard<std::mutex> lk(state_mu_);
    state_->release(client_id);
    return false;
  }

  void count_requests(Session& session, FrameReader& reader,
                      uint64_t client_id) {
    for (;;) {
      DecodeResult r = reader.next();
      if (r.status != DecodeStatus::kOk) {
        if (r.status != DecodeStatus::kIncomplete) session.parse_broken = true;
        return;
      }
      if (r.frame.kind == FrameKind::kRequest) {
        relayed_requests_.fetch_add(1);
        std::lock_guard<std::mutex> lk(state_mu_);
        state_->record_request(client_id, now_ns());
      }
    }
  }

  void relay(Session& session, FrameReader& reader, uint64_t client_id) {
    std::vector<uint8_t> buf(64 * 1024);
    for (;;) {
      pollfd fds[2];
      fds[0] = {session.client.fd(), POLLIN, 0};
      fds[1] = {session.backend.fd(), POLLIN, 0};
      int rc = ::poll(fds, 2, -1);
      if (rc < 0) continue;
      if (fds[0].revents) {
        ssize_t n = session.client.read_some(buf);
        if (n <= 0) return;
        auto chunk = std::span<const uint8_t>(buf.data(),
                                              static_cast<size_t>(n));
        session.backend.write_all(chunk);
        if (!session.parse_broken) {
          reader.feed(chunk);
          count_requests(session, reader, client_id);
        }
      }
      if (fds[1].revents) {
        ssize_t n = session.backend.read_some(buf);
        if (n <= 0) return;
        session.client.write_all(
            std::span<const uint8_t>(buf.data(), static_cast<size_t>(n)));
      }
    }
  }

  BalancerSpec spec_;
  TcpListener listener_;
  Wakeup wakeup_;
  std::thread accept_thread_;
  std::atomic<bool> stopping_{false};

  mutable std::mutex state_mu_;
  std::optional<AssignState> state_;
  std::vector<std::pair<uint64_t, size_t>> history_;

  mutable std::mutex sessions_mu_;
  std::vector<std::shared_ptr<Session>> sessions_;
  std::atomic<uint64_t> relayed_requests_{0};
};

}  // namespace taillab
