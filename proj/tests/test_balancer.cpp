#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "taillab/balancer.hpp"
#include "taillab/client.hpp"
#include "taillab/net.hpp"
#include "taillab/proto.hpp"
#include "taillab/server.hpp"

using namespace taillab;
using Catch::Matchers::ContainsSubstring;

namespace {

constexpr uint64_t kSecond = 1'000'000'000ull;

ServerSpec tiny_server(uint32_t id) {
  ServerSpec s;
  s.server_id = id;
  s.workload.name = "fixed";
  s.workload.mean_service_us = 50;  // fast enough that tests never queue much
  return s;
}

ClientSpec quick_client(uint64_t id, const std::string& target,
                        uint64_t budget, double qps) {
  ClientSpec c;
  c.client_id = id;
  c.target_address = target;
  c.total_requests = budget;
  c.schedule.intervals.push_back({0.0, qps});
  c.seed = 40 + id;
  c.response_timeout_s = 10.0;
  return c;
}

}  // namespace

TEST_CASE("policy names parse") {
  CHECK(parse_policy("round_robin") == Policy::kRoundRobin);
  CHECK(parse_policy("load_aware") == Policy::kLoadAware);
  REQUIRE_THROWS_WITH(parse_policy("least_conn"),
                      ContainsSubstring("least_conn"));
}

TEST_CASE("round robin assigns by arrival order modulo backends") {
  AssignState st(2, Policy::kRoundRobin);
  CHECK(st.assign(11) == 0);
  CHECK(st.assign(22) == 1);
  CHECK(st.assign(33) == 0);
  CHECK(st.assign(44) == 1);
  CHECK(st.live_clients() == 4);
  CHECK(st.backend_of(33).value() == 0);
  CHECK_FALSE(st.backend_of(99).has_value());

  // A departing and returning client consumes a fresh arrival slot.
  st.release(11);
  CHECK(st.live_clients() == 3);
  CHECK(st.assign(11) == 0);  // fifth arrival: 4 % 2
}

TEST_CASE("round robin spreads n*k clients evenly over k backends") {
  const size_t backends = 3, per_backend = 5;
  AssignState st(backends, Policy::kRoundRobin);
  std::map<size_t, size_t> count;
  for (uint64_t c = 0; c < backends * per_backend; c++) count[st.assign(c)]++;
  for (size_t b = 0; b < backends; b++) CHECK(count[b] == per_backend);
}

TEST_CASE("load aware picks the backend with the lowest declared rate sum") {
  std::map<uint64_t, double> declared{{1, 500.0}, {2, 200.0}, {3, 200.0}};
  AssignState st(2, Policy::kLoadAware, declared);

  // 500 -> backend 0 (both empty, tie breaks low); 200 -> backend 1 (0 < 500);
  // 200 -> backend 1 again (400 < 500).
  CHECK(st.assign(1) == 0);
  CHECK(st.assign(2) == 1);
  CHECK(st.assign(3) == 1);
  CHECK(st.backend_rate(0, 0) == 500.0);
  CHECK(st.backend_rate(1, 0) == 400.0);
}

TEST_CASE("load aware prefers the less loaded backend") {
  std::map<uint64_t, double> declared{{1, 500.0}, {2, 700.0}, {3, 100.0}};
  AssignState st(2, Policy::kLoadAware, declared);
  st.assign_to(1, 0);  // 500 on backend 0
  st.assign_to(2, 1);  // 700 on backend 1
  CHECK(st.assign(3) == 0);
  CHECK(st.backend_rate(0, 0) == 600.0);

  st.release(3);
  CHECK(st.backend_rate(0, 0) == 500.0);
  CHECK(st.live_clients() == 2);
}

TEST_CASE("assign_to does not consume an arrival slot") {
  AssignState st(2, Policy::kRoundRobin);
  st.assign_to(7, 1);
  CHECK(st.backend_of(7).value() == 1);
  // First true arrival still lands on backend 0.
  CHECK(st.assign(8) == 0);
}

TEST_CASE("measured rate counts requests in the trailing window") {
  AssignState st(1, Policy::kLoadAware);  // no declared rates: measure
  st.assign(5, 0);
  uint64_t now = 10 * kSecond;
  for (int i = 0; i < 20; i++) {
    st.record_request(5, now - (static_cast<uint64_t>(i) * kSecond) / 5);
  }
  // All 20 fall inside the trailing 5 s window: 4 QPS.
  CHECK_THAT(st.client_rate(5, now), Catch::Matchers::WithinRel(4.0, 1e-12));

  // Six seconds later every sample has aged out.
  CHECK(st.client_rate(5, now + 6 * kSecond) == 0.0);

  // Declared rates win over measurements when present.
  AssignState decl(1, Policy::kLoadAware, {{5, 123.0}});
  decl.assign(5, 0);
  decl.record_request(5, now);
  CHECK(decl.client_rate(5, now) == 123.0);
}

TEST_CASE("assignment state rejects misuse") {
  REQUIRE_THROWS_AS(AssignState(0, Policy::kRoundRobin), ConfigError);
  AssignState st(2, Policy::kRoundRobin);
  REQUIRE_THROWS_AS(st.assign_to(1, 5), ConfigError);

  BalancerSpec no_backends;
  REQUIRE_THROWS_WITH(validate_balancer(no_backends),
                      ContainsSubstring("backend"));
}

TEST_CASE("balancer relays a full client run transparently") {
  Server server(tiny_server(3));
  server.start();

  BalancerSpec bspec;
  bspec.backends = {server.bound_address().str()};
  Balancer balancer(bspec);
  balancer.start();

  ClientSpec cspec = quick_client(1, balancer.bound_address(), 40, 400.0);
  ClientResult res = Client(cspec).run();

  REQUIRE(res.error.empty());
  REQUIRE(res.entries.size() == 40);
  CHECK(res.duplicate_responses == 0);
  CHECK(res.unknown_responses == 0);
  for (const auto& e : res.entries) {
    CHECK(e.resp.server_id == 3);
    CHECK(e.recv_ns >= e.send_ns);
    CHECK(e.resp.service_end_ns >= e.resp.service_start_ns);
  }

  // One HELLO-gated arrival, and every request counted on the wire.
  auto history = balancer.assignment_history();
  REQUIRE(history.size() == 1);
  CHECK(history[0].first == 1);
  CHECK(history[0].second == 0);
  CHECK(balancer.relayed_requests() == 40);

  balancer.stop();
  server.stop();
  CHECK(server.counters().served_total == 40);
}

TEST_CASE("load aware split matches declared rates across two backends") {
  Server s0(tiny_server(0)), s1(tiny_server(1));
  s0.start();
  s1.start();

  BalancerSpec bspec;
  bspec.backends = {s0.bound_address().str(), s1.bound_address().str()};
  bspec.policy = "load_aware";
  bspec.declared_rates = {{1, 500.0}, {2, 200.0}, {3, 200.0}};
  Balancer balancer(bspec);
  balancer.start();

  auto send = [](TcpConn& c, const Frame& f) {
    auto bytes = encode(f);
    c.write_all(bytes);
  };
  auto read_frame = [](TcpConn& c, FrameReader& reader) {
    std::vector<uint8_t> buf(4096);
    auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
    for (;;) {
      DecodeResult r = reader.next();
      if (r.status == DecodeStatus::kOk) return r.frame;
      REQUIRE(r.status == DecodeStatus::kIncomplete);
      REQUIRE(std::chrono::steady_clock::now() < deadline);
      pollfd pfd{c.fd(), POLLIN, 0};
      if (::poll(&pfd, 1, 100) <= 0) continue;
      ssize_t n = c.read_some(buf);
      REQUIRE(n != 0);  // peer must not close mid-exchange
      if (n > 0) reader.feed(std::span<const uint8_t>(buf.data(), size_t(n)));
    }
  };
  auto await_assignments = [&](size_t n) {
    auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
    while (balancer.assignment_history().size() < n) {
      REQUIRE(std::chrono::steady_clock::now() < deadline);
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
  };

  // Three clients connected at once, arriving in id order; the heavy one
  // first, as its lower start delay guarantees in a scenario run.
  std::vector<TcpConn> conns;
  std::vector<FrameReader> readers(3);
  for (uint64_t id = 1; id <= 3; id++) {
    conns.push_back(TcpConn::dial(Addr::parse(balancer.bound_address())));
    send(conns.back(), make_frame(FrameKind::kClientHello, 0, id));
    await_assignments(static_cast<size_t>(id));
  }

  auto history = balancer.assignment_history();
  REQUIRE(history.size() == 3);
  CHECK(history[0] == std::make_pair(uint64_t{1}, size_t{0}));
  CHECK(history[1] == std::make_pair(uint64_t{2}, size_t{1}));
  CHECK(history[2] == std::make_pair(uint64_t{3}, size_t{1}));

  // Each connection's requests really reach its assigned backend.
  for (uint64_t id = 1; id <= 3; id++) {
    send(conns[id - 1], make_frame(FrameKind::kRequest, 42, id));
    Frame resp = read_frame(conns[id - 1], readers[id - 1]);
    CHECK(resp.kind == FrameKind::kResponse);
    CHECK(resp.request_id == 42);
    ResponsePayload p = decode_response_payload(resp.payload);
    CHECK(p.server_id == (id == 1 ? 0 : 1));
  }
  for (uint64_t id = 1; id <= 3; id++) {
    send(conns[id - 1], make_frame(FrameKind::kClientBye, 0, id));
    conns[id - 1].close();
  }

  balancer.stop();
  s0.stop();
  s1.stop();
}

TEST_CASE("connections without a hello never count as arrivals") {
  Server server(tiny_server(1));
  server.start();

  BalancerSpec bspec;
  bspec.backends = {server.bound_address().str()};
  Balancer balancer(bspec);
  balancer.start();

  {
    // Bare connect, no traffic, close. The balancer must not assign it.
    TcpConn probe = TcpConn::dial(Addr::parse(balancer.bound_address()));
  }
  std::this_thread::sleep_for(std::chrono::milliseconds(200));
  CHECK(balancer.assignment_history().empty());

  // A real client afterwards is still the first arrival (backend 0).
  ClientSpec cspec = quick_client(9, balancer.bound_address(), 5, 200.0);
  ClientResult res = Client(cspec).run();
  REQUIRE(res.error.empty());
  auto history = balancer.assignment_history();
  REQUIRE(history.size() == 1);
  CHECK(history[0] == std::make_pair(uint64_t{9}, size_t{0}));

  balancer.stop();
  server.stop();
}

TEST_CASE("dial fallback walks past a dead backend") {
  Server live(tiny_server(7));
  live.start();

  // Reserve an address that refuses connections by binding and closing.
  std::string dead_addr;
  {
    TcpListener dead = TcpListener::listen(Addr::parse("127.0.0.1:0"));
    dead_addr = dead.bound_address().str();
  }

  BalancerSpec bspec;
  bspec.backends = {dead_addr, live.bound_address().str()};
  Balancer balancer(bspec);
  balancer.start();

  // Round robin picks index 0 (dead); the session must fall back to 1.
  ClientSpec cspec = quick_client(4, balancer.bound_address(), 8, 200.0);
  ClientResult res = Client(cspec).run();
  REQUIRE(res.error.empty());
  REQUIRE(res.entries.size() == 8);
  for (const auto& e : res.entries) CHECK(e.resp.server_id == 7);

  auto history = balancer.assignment_history();
  REQUIRE(history.size() == 1);
  CHECK(history[0].second == 1);

  balancer.stop();
  live.stop();
}

TEST_CASE("client sees a closed connection when every backend is down") {
  std::string dead_addr;
  {
    TcpListener dead = TcpListener::listen(Addr::parse("127.0.0.1:0"));
    dead_addr = dead.bound_address().str();
  }

  BalancerSpec bspec;
  bspec.backends = {dead_addr};
  Balancer balancer(bspec);
  balancer.start();

  ClientSpec cspec = quick_client(2, balancer.bound_address(), 3, 100.0);
  cspec.response_timeout_s = 2.0;
  ClientResult res = Client(cspec).run();
  CHECK((res.transport_error || !res.error.empty()));
  CHECK(res.entries.empty());
  CHECK(balancer.assignment_history().empty());

  balancer.stop();
}

TEST_CASE("balancer survives a malformed client stream") {
  Server server(tiny_server(2));
  server.start();

  BalancerSpec bspec;
  bspec.backends = {server.bound_address().str()};
  Balancer balancer(bspec);
  balancer.start();

  {
    // Send garbage that is not a HELLO frame; the session must drop it
    // without assigning, and without disturbing later clients.
    TcpConn garbage = TcpConn::dial(Addr::parse(balancer.bound_address()));
    std::vector<uint8_t> junk(64, 0xEE);
    garbage.write_all(junk);
    std::this_thread::sleep_for(std::chrono::milliseconds(300));
  }
  CHECK(balancer.assignment_history().empty());

  ClientSpec cspec = quick_client(6, balancer.bound_address(), 6, 300.0);
  ClientResult res = Client(cspec).run();
  REQUIRE(res.error.empty());
  REQUIRE(res.entries.size() == 6);

  balancer.stop();
  server.stop();
}
