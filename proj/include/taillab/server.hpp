#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "taillab/clock.hpp"
#include "taillab/net.hpp"
#include "taillab/proto.hpp"
#include "taillab/workload.hpp"

namespace taillab {

struct ServerSpec {
  uint32_t server_id = 0;
  std::string listen_address = "127.0.0.1:0";
  int workers = 1;
  WorkloadSpec workload;
  uint64_t queue_capacity = 0;  // 0 = unbounded
  std::string log_path;         // optional CSV event log
};

struct ServerCounters {
  uint64_t active_clients = 0;
  uint64_t served_total = 0;
  uint64_t response_drops = 0;
  uint64_t queue_rejects = 0;
  uint64_t protocol_errors = 0;
};

/// Persistent request server. Starts with zero clients, accepts new
/// connections at any time while requests are in flight, idles on a
/// blocking poll when no client is connected, and terminates only on
/// stop(). One dispatcher reads sockets and feeds a FIFO queue drained
/// by `workers` executor threads.
class Server {
 public:
  explicit Server(ServerSpec spec)
      : spec_(std::move(spec)),
        listener_(TcpListener::listen(Addr::parse(spec_.listen_address))) {
    validate_workload(spec_.workload);
    if (spec_.workers < 1) throw ConfigError("server workers must be >= 1");
    if (!spec_.log_path.empty()) {
      log_.open(spec_.log_path, std::ios::trunc);
      if (!log_) throw ConfigError("cannot open server log " + spec_.log_path);
      log_ << "event,t_ns,client_id,request_id,server_recv_ns,"
              "service_start_ns,service_end_ns\n";
    }
  }

  ~Server() { stop(); }

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  const Addr& bound_address() const { return listener_.bound_address(); }
  uint32_t id() const { return spec_.server_id; }

  void start() {
    executor_.emplace();  // calibrate once, at server start
    dispatcher_ = std::thread([this] { dispatch_loop(); });
    for (int i = 0; i < spec_.workers; i++) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  /// Idempotent. Unblocks the dispatcher, drains workers, closes sockets.
  void stop() {
    bool expected = false;
    if (!stopping_.compare_exchange_strong(expected, true)) {
      join();
      return;
    }
    wake_.signal();
    queue_cv_.notify_all();
    join();
    if (log_.is_open()) log_.flush();
  }

  void join() {
    if (dispatcher_.joinable()) dispatcher_.join();
    for (auto& w : workers_) {
      if (w.joinable()) w.join();
    }
  }

  ServerCounters counters() const {
    ServerCounters c;
    c.active_clients = active_clients_.load();
    c.served_total = served_total_.load();
    c.response_drops = response_drops_.load();
    c.queue_rejects = queue_rejects_.load();
    c.protocol_errors = protocol_errors_.load();
    return c;
  }

  uint64_t active_clients() const { return active_clients_.load(); }
  uint64_t served_total() const { return served_total_.load(); }

  size_t queue_depth() const {
    std::lock_guard<std::mutex> lk(queue_mu_);
    return queue_.size();
  }

 private:
  struct Connection {
    explicit Connection(TcpConn c) : sock(std::move(c)) {}
    TcpConn sock;
    std::mutex write_mu;
    std::atomic<bool> closed{false};
    bool hello_seen = false;
    uint64_t client_id = 0;
    FrameReader reader;
    std::optional<ServiceSampler> sampler;
  };

  struct Task {
    std::shared_ptr<Connection> conn;
    uint64_t request_id = 0;
    uint64_t client_id = 0;
    uint64_t recv_ns = 0;     // enqueue timestamp, stamped at socket read
    uint64_t service_ns = 0;  // sampled up front by the dispatcher
  };

  void dispatch_loop() {
    std::vector<pollfd> pfds;
    while (!stopping_.load()) {
      pfds.clear();
      pfds.push_back({wake_.fd(), POLLIN, 0});
      pfds.push_back({listener_.fd(), POLLIN, 0});
      for (auto& c : conns_) pfds.push_back({c->sock.fd(), POLLIN, 0});

      // With zero clients this blocks indefinitely: idle costs no CPU.
      int rc = ::poll(pfds.data(), pfds.size(), -1);
      if (rc < 0) continue;
      if (stopping_.load()) break;

      if (pfds[0].revents & POLLIN) wake_.drain();
      if (pfds[1].revents & POLLIN) check_new_clients();

      // pfds[i + 2] maps to conns_[i]; iterate over a snapshot index
      // range since handle_readable may drop connections.
      std::vector<std::shared_ptr<Connection>> readable;
      for (size_t i = 0; i + 2 < pfds.size(); i++) {
        if (pfds[i + 2].revents & (POLLIN | POLLHUP | POLLERR)) {
          readable.push_back(conns_[i]);
        }
      }
      for (auto& c : readable) handle_readable(c);
    }
    // Unblock any client still connected.
    for (auto& c : conns_) {
      c->closed.store(true);
      c->sock.shutdown_both();
    }
  }

  /// Accepts every pending connection attempt. Runs on the dispatcher,
  /// between socket reads, so in-flight request processing never stops.
  void check_new_clients() {
    for (;;) {
      TcpConn c = listener_.accept();
      if (!c.valid()) break;
      c.set_nonblocking(true);
      conns_.push_back(std::make_shared<Connection>(std::move(c)));
    }
  }

  void handle_readable(const std::shared_ptr<Connection>& conn) {
    ssize_t n = conn->sock.read_some(read_buf_);
    if (n < 0) return;  // spurious wakeup
    if (n == 0) {
      drop_connection(conn, "disconnect");
      return;
    }
    conn->reader.feed(std::span<const uint8_t>(read_buf_.data(),
                                               static_cast<size_t>(n)));
    for (;;) {
      DecodeResult r = conn->reader.next();
      if (r.status == DecodeStatus::kIncomplete) break;
      if (r.status != DecodeStatus::kOk) {
        protocol_errors_.fetch_add(1);
        drop_connection(conn, "protocol_error");
        return;
      }
      handle_frame(conn, r.frame);
      if (conn->closed.load()) return;
    }
  }

  void handle_frame(const std::shared_ptr<Connection>& conn, Frame& f) {
    switch (f.kind) {
      case FrameKind::kClientHello:
        if (!conn->hello_seen) {
          conn->hello_seen = true;
          conn->client_id = f.client_id;
          conn->sampler.emplace(spec_.workload, f.client_id);
          active_clients_.fetch_add(1);
          log_event("hello", f.client_id);
        }
        break;
      case FrameKind::kClientBye:
        log_event("bye", f.client_id);
        drop_connection(conn, nullptr);
        break;
      case FrameKind::kRequest: {
        if (!conn->hello_seen) {
          // Requests are only valid after the handshake.
          protocol_errors_.fetch_add(1);
          drop_connection(conn, "protocol_error");
          return;
        }
        Task t;
        t.conn = conn;
        t.request_id = f.request_id;
        t.client_id = f.client_id;
        t.recv_ns = now_ns();
        t.service_ns = conn->sampler->next_service_ns();
        {
          std::lock_guard<std::mutex> lk(queue_mu_);
          if (spec_.queue_capacity != 0 &&
              queue_.size() >= spec_.queue_capacity) {
            queue_rejects_.fetch_add(1);
            log_event("reject", f.client_id, f.request_id);
            return;
          }
          queue_.push_back(std::move(t));
        }
        queue_cv_.notify_one();
        break;
      }
      case FrameKind::kResponse:
        protocol_errors_.fetch_add(1);
        break;
    }
  }

  /// Removes a connection from the poll set. The socket itself stays
  /// open until the last in-flight task releases its reference, so a
  /// worker can never write into a recycled descriptor.
  void drop_connection(const std::shared_ptr<Connection>& conn,
                       const char* event) {
    if (conn->closed.exchange(true)) return;
    if (conn->hello_seen) {
      active_clients_.fetch_sub(1);
      if (event) log_event(event, conn->client_id);
    }
    conn->sock.shutdown_both();
    std::erase(conns_, conn);
  }

  void worker_loop() {
    for (;;) {
      Task task;
      {
        std::unique_lock<std::mutex> lk(queue_mu_);
        queue_cv_.wait(lk, [this] { return stopping_.load() || !queue_.empty(); });
        if (stopping_.load()) return;  // backlog abandoned on stop
        task = std::move(queue_.front());
        queue_.pop_front();
      }

      uint64_t start = now_ns();
      executor_->execute(task.service_ns, spec_.workload.exec);
      uint64_t end = now_ns();
      served_total_.fetch_add(1);

      ResponsePayload payload;
      payload.server_recv_ns = task.recv_ns;
      payload.service_start_ns = start;
      payload.service_end_ns = end;
      payload.server_id = spec_.server_id;

      Frame resp = make_frame(FrameKind::kResponse, task.request_id,
                              task.client_id, encode_response_payload(payload));
      bool delivered = false;
      if (!task.conn->closed.load()) {
        std::lock_guard<std::mutex> lk(task.conn->write_mu);
        try {
          task.conn->sock.write_all(encode(resp));
          delivered = true;
        } catch (const NetError&) {
          task.conn->closed.store(true);
        }
      }
      if (delivered) {
        log_request(task, payload);
      } else {
        response_drops_.fetch_add(1);
        log_event("drop", task.client_id, task.request_id);
      }
    }
  }

  void log_event(const char* event, uint64_t client_id,
                 std::optional<uint64_t> request_id = std::nullopt) {
    if (!log_.is_open()) return;
    std::lock_guard<std::mutex> lk(log_mu_);
    log_ << event << ',' << now_ns() << ',' << client_id << ',';
    if (request_id) log_ << *request_id;
    log_ << ",,,\n";
  }

  void log_request(const Task& t, const ResponsePayload& p) {
    if (!log_.is_open()) return;
    std::lock_guard<std::mutex> lk(log_mu_);
    log_ << "request," << p.service_end_ns << ',' << t.client_id << ','
         << t.request_id << ',' << p.server_recv_ns << ','
         << p.service_start_ns << ',' << p.service_end_ns << '\n';
  }

  ServerSpec spec_;
  TcpListener listener_;
  Wakeup wake_;
  std::optional<ServiceExecutor> executor_;

  std::thread dispatcher_;
  std::vector<std::thread> workers_;
  std::atomic<bool> stopping_{false};

  // Dispatcher-owned; only the dispatcher touches the list itself.
  std::vector<std::shared_ptr<Connection>> conns_;
  std::vector<uint8_t> read_buf_ = std::vector<uint8_t>(64 * 1024);

  mutable std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::deque<Task> queue_;

  std::atomic<uint64_t> active_clients_{0};
  std::atomic<uint64_t> served_total_{0};
  std::atomic<uint64_t> response_drops_{0};
  std::atomic<uint64_t> queue_rejects_{0};
  std::atomic<uint64_t> protocol_errors_{0};

  std::mutex log_mu_;
  std::ofstream log_;
};

}  // namespace taillab
